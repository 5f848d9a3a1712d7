// temporary pre-flight probe for the desk-scale experiment bars
use bigl::data::phantom::{generate_phantom, PhantomSpec};
use bigl::data::{load_cases, load_eval_case, split_cases, Modality};
use bigl::domain::{LabelScheme, TrainConfig};
use bigl::eval::evaluate_split;
use bigl::metrics::regions_for;
use bigl::synthesis::generate;
use bigl::trainer::*;
use rand::Rng;
use std::time::Instant;

fn main() {
    let t_all = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    let spec = PhantomSpec { n_cases: 30, seed: 7, ..PhantomSpec::default() };
    generate_phantom(&spec, &data_dir).unwrap();
    let cases = load_cases(&data_dir).unwrap();

    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        image_size: (64, 64),
        base_width: 8,
        gen_width: 8,
        disc_width: 8,
        cycle_reconstruction: true,
        seed: 13,
        snapshot_every: 50,
        ..TrainConfig::default()
    };
    let split_seed: u64 = bigl::rng::stream(cfg.seed, "data-split", 0).gen();
    let (train, _val, test) = split_cases(&cases, (0.7, 0.1, 0.2), split_seed).unwrap();
    println!("split: train={} test={}", train.len(), test.len());
    let data = load_train_data(&train, LabelScheme::Brats, cfg.image_size).unwrap();
    let regions = regions_for(LabelScheme::Brats);

    // source-only baseline
    let t0 = Instant::now();
    let so = source_only_baseline(&cfg, &data, &tmp.path().join("so")).unwrap();
    println!("source-only train: {:?}", t0.elapsed());
    let rep_a = evaluate_split(&so.nets.segnet, &test, Modality::A, LabelScheme::Brats, &regions).unwrap();
    let rep_b = evaluate_split(&so.nets.segnet, &test, Modality::B, LabelScheme::Brats, &regions).unwrap();
    let wt_a = rep_a.summary["WT"].dsc_mean / 100.0;
    let wt_b = rep_b.summary["WT"].dsc_mean / 100.0;
    println!("source-only WT dsc: source={wt_a:.4} target={wt_b:.4} drop={:.4}", wt_a - wt_b);

    // stage 1
    let syn_cfg = TrainConfig { epochs: 20, ..cfg.clone() };
    let t0 = Instant::now();
    let s1 = train_stage1(&syn_cfg, &data, &tmp.path().join("run")).unwrap();
    println!("stage1 train: {:?} ({} iters)", t0.elapsed(), s1.outcome.reports.len());
    // disc_syn drop at batch 200
    let d: Vec<f64> = s1.outcome.reports.iter().filter_map(|r| r.disc_syn).collect();
    let first10: f64 = d[..10].iter().sum::<f64>() / 10.0;
    let at200: f64 = d[190..200].iter().sum::<f64>() / 10.0;
    println!("disc_syn first10={first10:.4} at200={at200:.4} drop={:.2}%", 100.0 * (1.0 - at200 / first10));
    // paired MAE on test cases, [-1,1] scale
    let mut total = 0.0f64;
    let mut count = 0usize;
    for case in &test {
        let ea = load_eval_case(case, Modality::A, LabelScheme::Brats, cfg.image_size).unwrap();
        let eb = load_eval_case(case, Modality::B, LabelScheme::Brats, cfg.image_size).unwrap();
        for (sa, &za) in ea.slices.iter().zip(&ea.slice_z) {
            let Some(pos) = eb.slice_z.iter().position(|&zb| zb == za) else { continue };
            let sb = &eb.slices[pos];
            let syn = generate(&s1.nets.g_s2t, sa).unwrap();
            let diff: f64 = syn
                .unit
                .iter()
                .zip(sb.unit.iter())
                .map(|(&x, &y)| (2.0 * (x - y)).abs() as f64)
                .sum();
            total += diff / (syn.unit.len() as f64);
            count += 1;
        }
    }
    println!("paired MAE over {count} slices: {:.4}", total / count as f64);

    // stage 2
    let t0 = Instant::now();
    let s2 = train_stage2(&cfg, &data, &s1.nets, &tmp.path().join("run")).unwrap();
    println!("stage2 train: {:?} ({} iters)", t0.elapsed(), s2.outcome.reports.len());
    let rep_bigl = evaluate_split(&s2.nets.segnet, &test, Modality::B, LabelScheme::Brats, &regions).unwrap();
    let wt_bigl = rep_bigl.summary["WT"].dsc_mean / 100.0;
    println!("bigl WT dsc target={wt_bigl:.4} improvement={:.4}", wt_bigl - wt_b);
    let mean_bigl: f64 = rep_bigl.summary.values().map(|s| s.dsc_mean).sum::<f64>() / rep_bigl.summary.len() as f64;
    println!("bigl mean region dsc target={:.2}", mean_bigl);
    println!("total probe time: {:?}", t_all.elapsed());
}

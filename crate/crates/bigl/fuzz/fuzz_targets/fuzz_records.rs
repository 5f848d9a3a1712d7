//! Fuzzes the per-case metric record (JSON lines) parser. Arbitrary
//! text must parse or error without panicking; accepted rows are
//! serialized and parsed again to exercise the writer/reader pair.
#![no_main]

use bigl::report::{parse_records_jsonl, records_to_jsonl, MetricRecord};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = parse_records_jsonl(text) {
        let mut records = Vec::new();
        for row in &rows {
            for (metric, value) in [("dsc", Some(row.dsc)), ("hd95", row.hd95), ("asd", row.asd)] {
                records.push(MetricRecord {
                    case_id: row.case_id.clone(),
                    region: row.region.clone(),
                    metric: metric.to_string(),
                    value,
                });
            }
        }
        let again = parse_records_jsonl(&records_to_jsonl(&records))
            .expect("serialized records must re-parse");
        assert_eq!(rows, again, "round trip must keep every row");
    }
});

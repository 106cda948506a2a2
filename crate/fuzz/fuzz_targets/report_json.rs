#![no_main]
use libfuzzer_sys::fuzz_target;

use cemmaf_cli::ExplanationReport;

fuzz_target!(|text: &str| {
    if let Ok(report) = ExplanationReport::from_json(text) {
        let printed = report.to_json().expect("parsed report serializes");
        let again = ExplanationReport::from_json(&printed).expect("printed report parses");
        assert_eq!(again.to_json().expect("serializes"), printed);
    }
});

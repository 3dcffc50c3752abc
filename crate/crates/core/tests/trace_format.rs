//! The JSONL trace format as an external exporter writes it.

use ceai_core::ceai::{activation_probability, Contrast};
use ceai_core::trace::{TraceSet, POSITION_TAG, TRACE_VERSION};

const POS: &str = r#"{"trace_version":1,"source":"hf:toy-moe","model_shape":[2,4]}
{"prompt_id":"a","scenario_label":"pos","layer_count":2,"experts_per_layer":4,"activations":[[[0,0.75],[2,0.25]],[[1,1.0]]],"position_tag":"last_input_token","shared":[3]}
{"prompt_id":"b","layer_count":2,"experts_per_layer":4,"activations":[[[0,0.5],[1,0.5]],[[1,0.6],[3,0.4]]],"position_tag":"last_input_token"}
"#;

const NEG: &str = r#"{"trace_version":1,"source":"hf:toy-moe","model_shape":[2,4]}
{"prompt_id":"c","layer_count":2,"experts_per_layer":4,"activations":[[[3,1.0]],[[2,1.0]]],"position_tag":"last_input_token"}
"#;

#[test]
fn exporter_files_parse_and_contrast() {
    let pos = TraceSet::read(POS.as_bytes()).unwrap();
    let neg = TraceSet::read(NEG.as_bytes()).unwrap();
    assert_eq!(TRACE_VERSION, 1);
    assert_eq!(pos.model_shape, (2, 4));
    assert_eq!(pos.records[0].shared, vec![3]);
    assert_eq!(pos.records[0].scenario_label.as_deref(), Some("pos"));
    assert!(pos.records.iter().all(|r| r.position_tag == POSITION_TAG));

    let p = activation_probability(&pos).unwrap();
    assert_eq!(p.values, vec![vec![1.0, 0.5, 0.5, 0.0], vec![0.0, 1.0, 0.0, 0.5]]);
    let profile = Contrast::new(&pos, &neg).profile().unwrap();
    assert_eq!(profile.delta[0], vec![1.0, 0.5, 0.5, -1.0]);
    assert_eq!(profile.delta[1], vec![0.0, 1.0, -1.0, 0.5]);
}

#[test]
fn written_files_round_trip_byte_for_byte() {
    let pos = TraceSet::read(POS.as_bytes()).unwrap();
    let mut bytes = Vec::new();
    pos.write(&mut bytes).unwrap();
    let again = TraceSet::read(bytes.as_slice()).unwrap();
    assert_eq!(again, pos);
    let mut twice = Vec::new();
    again.write(&mut twice).unwrap();
    assert_eq!(bytes, twice);
}

#[test]
fn malformed_files_are_rejected() {
    let cases = [
        // wrong version
        POS.replacen("\"trace_version\":1", "\"trace_version\":2", 1),
        // gates do not sum to one
        POS.replacen("[1,1.0]", "[1,0.9]", 1),
        // record shape disagrees with header
        POS.replacen("[2,4]", "[2,5]", 1),
        // wrong position tag
        NEG.replacen("last_input_token", "first_token", 1),
        // not JSON
        format!("{POS}not json\n"),
    ];
    for text in cases {
        assert!(TraceSet::read(text.as_bytes()).is_err(), "{text}");
    }
}

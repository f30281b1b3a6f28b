use std::f64::consts::FRAC_1_SQRT_2;
use std::path::PathBuf;

use ionspec::linalg::C64;
use ionspec::protocol::{
    apply_override, builtin, builtin_protocols, codes, parse_protocol, parse_value, parse_with_overrides,
    pe_builtin, pe_diagram_builtin, relative_deviation, DelaySpec, Method, ModelSpec, PeDiagram, ProtocolSpec,
    BUILTIN_EPSILON,
};
use ionspec::Error;
use proptest::prelude::*;
use serde_json::json;

fn shipped_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../protocols")
}

fn codes_of(e: Error) -> Vec<String> {
    match e {
        Error::Protocol(d) => d.into_iter().map(|d| d.code).collect(),
        other => panic!("expected diagnostics, got {other}"),
    }
}

fn sqc_doc() -> serde_json::Value {
    builtin("sqc").unwrap().to_value()
}

#[test]
fn shipped_files_match_builtins() {
    let builtins = builtin_protocols();
    for (name, spec) in &builtins {
        let path = shipped_dir().join(format!("{name}.json"));
        let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(&parse_protocol(&text).unwrap(), spec, "{name}");
    }
    assert!(builtins.len() >= 12);
    assert!(builtin("no-such-protocol").is_none());
}

#[test]
fn builtins_are_valid_and_consistent() {
    for (name, spec) in builtin_protocols() {
        spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(spec.pulses.len(), spec.signature.len(), "{name}");
        assert_eq!(spec.signature.iter().sum::<i32>(), 0, "{name}");
        assert_eq!(spec.delays.len(), spec.pulses.len(), "{name}");
        assert_eq!(spec.units, spec.model.units(), "{name}");
    }
}

#[test]
fn overrides_set_nested_fields() {
    let text = builtin("sqc").unwrap().to_json();
    let spec = parse_with_overrides(
        &text,
        &["model.B=0.7".into(), "method=both".into(), "delays.t1.points=10".into()],
    )
    .unwrap();
    match &spec.model {
        ModelSpec::Ising(m) => assert_eq!(m.b, 0.7),
        _ => panic!("sqc is an Ising protocol"),
    }
    assert_eq!(spec.method, Method::Both);
    assert_eq!(spec.delays["t1"].points, Some(10));

    let mut doc = sqc_doc();
    apply_override(&mut doc, "pulses.0.site=2").unwrap();
    assert_eq!(doc["pulses"][0]["site"], 2);
    assert!(apply_override(&mut doc, "pulses.9.site=2").is_err());
    assert!(apply_override(&mut doc, "pulses.x.site=2").is_err());
    assert!(apply_override(&mut doc, "no-equals-sign").is_err());
    assert!(apply_override(&mut doc, "model..B=1").is_err());
    // invalid values are caught after the override is applied
    let e = parse_with_overrides(&text, &["model.n_spins=0".into()]).unwrap_err();
    assert!(codes_of(e).contains(&codes::MODEL.to_string()));
}

#[test]
fn syntax_errors_carry_a_location() {
    let e = parse_protocol("{\n  \"units\": \"J0\",\n  \"model\": }").unwrap_err();
    match e {
        Error::Protocol(d) => {
            assert_eq!(d[0].code, codes::SYNTAX);
            assert_eq!(d[0].line, Some(3));
            assert!(d[0].column.is_some());
            assert!(d[0].to_string().contains("line 3"));
        }
        other => panic!("{other}"),
    }
}

#[test]
fn unknown_fields_name_their_path() {
    let mut doc = sqc_doc();
    doc["readout"]["colour"] = json!("red");
    match parse_value(doc).unwrap_err() {
        Error::Protocol(d) => {
            assert_eq!(d[0].code, codes::SCHEMA);
            assert!(d[0].path.starts_with("readout"), "{}", d[0].path);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn cross_field_rules_are_checked() {
    let cases: Vec<(serde_json::Value, &str)> = vec![
        (json!({"readout": {"kind": "sigma-z", "site": 9}}), codes::SITE_RANGE),
        (json!({"units": "nu_x"}), codes::UNITS),
        (json!({"signature": [-1, 1, 1]}), codes::SIGNATURE_LENGTH),
        (json!({"signature": [-1, 1, 1, 1]}), codes::SIGNATURE_SUM),
        (json!({"pulses": []}), codes::NO_PULSES),
        (json!({"readout": {"kind": "motional", "site": 1}}), codes::OBSERVABLE_MODEL),
        (json!({"initial": "steady-state"}), codes::STEADY_STATE_BATH),
        (json!({"transform": {"axes": ["t7"]}}), codes::TRANSFORM),
    ];
    for (patch, code) in cases {
        let mut doc = sqc_doc();
        for (k, v) in patch.as_object().unwrap() {
            doc[k] = v.clone();
        }
        let got = codes_of(parse_value(doc).unwrap_err());
        assert!(got.iter().any(|c| c == code), "expected {code}, got {got:?}");
    }
}

#[test]
fn reduced_grids_shrink_scans_only() {
    let spec = builtin("dqc").unwrap();
    let small = spec.reduced(8, 2);
    for (name, d) in &small.delays {
        if d.is_scan() {
            assert!(d.points.unwrap() <= 8, "{name}");
        } else {
            assert_eq!(d, &spec.delays[name]);
        }
    }
    match small.model {
        ModelSpec::Phonon(p) => {
            assert_eq!(p.excitation_cap, Some(2));
            assert_eq!(p.local_dim, 3);
        }
        _ => panic!("dqc is a phonon protocol"),
    }
}

fn cold(mut spec: ProtocolSpec) -> ProtocolSpec {
    if let ModelSpec::Phonon(p) = &mut spec.model {
        p.baths.iter_mut().for_each(|b| b.nbar = 0.0);
    }
    spec.reduced(6, 4)
}

#[test]
fn selected_diagrams_sum_to_the_echo_without_heating() {
    let run = |s: &ProtocolSpec| s.prepare().unwrap().run().unwrap().signal.values;
    let full = run(&cold(pe_builtin(0.0)));
    let mut sum = full.mapv(|_| C64::new(0.0, 0.0));
    for d in PeDiagram::ALL {
        sum.scaled_add(C64::new(d.weight(BUILTIN_EPSILON, FRAC_1_SQRT_2), 0.0), &run(&cold(pe_diagram_builtin(d, 0.0))));
    }
    let dev = relative_deviation(&full, &sum);
    assert!(dev < 1e-10, "{dev:e}");
}

fn any_delay() -> impl Strategy<Value = DelaySpec> {
    prop_oneof![
        (0.0f64..50.0).prop_map(DelaySpec::fixed),
        (0.0f64..5.0, 0.01f64..1.0, 2usize..200).prop_map(|(a, s, n)| DelaySpec::scan_step(a, s, n)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn json_round_trip(
        which in 0usize..12,
        d in prop::collection::vec(any_delay(), 4),
        method in prop_oneof![Just(Method::PhaseCycling), Just(Method::Direct), Just(Method::Both)],
    ) {
        let all: Vec<ProtocolSpec> = builtin_protocols().into_values().collect();
        let mut spec = all[which % all.len()].clone();
        for (slot, new) in spec.delays.values_mut().zip(d) {
            *slot = new;
        }
        spec.method = method;
        let back = parse_protocol(&spec.to_json());
        prop_assume!(back.is_ok());
        prop_assert_eq!(back.unwrap(), spec);
    }
}

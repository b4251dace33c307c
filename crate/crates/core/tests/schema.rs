use harvest_core::experiment::{parse_doc, preset_names, preset_text};
use serde_json::Value;

fn validator() -> jsonschema::Validator {
    let text = include_str!("../../../docs/config.schema.json");
    let schema: Value = serde_json::from_str(text).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

#[test]
fn presets_conform_to_published_schema() {
    let v = validator();
    for name in preset_names() {
        let text = preset_text(name).unwrap();
        let doc: Value = serde_json::from_str(text).unwrap();
        let errors: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{name}: {errors:?}");
        parse_doc(text, name).unwrap();
    }
}

#[test]
fn schema_and_parser_reject_the_same_typos() {
    let v = validator();
    let base: Value = serde_json::from_str(preset_text("resnet18").unwrap()).unwrap();
    let edits: [(&str, &str); 5] = [
        ("", "tik"),
        ("pipeline", "num_stage"),
        ("limits", "grace"),
        ("runtime", "jitter"),
        ("prices", "price_server"),
    ];
    for (section, key) in edits {
        let mut doc = base.clone();
        let target = if section.is_empty() {
            &mut doc
        } else {
            doc.as_object_mut()
                .unwrap()
                .entry(section)
                .or_insert(Value::Object(Default::default()))
        };
        target.as_object_mut().unwrap().insert(key.into(), Value::from(1));
        assert!(!v.is_valid(&doc), "schema accepted {section}.{key}");
        assert!(
            parse_doc(&doc.to_string(), "edited").is_err(),
            "parser accepted {section}.{key}"
        );
    }
}

//! The Adult template renders the reference two-example prompt byte for byte.

use std::path::PathBuf;
use std::time::Instant;

use fairicl::data::{load_csv, Schema};
use fairicl::serialize::{build_icl_prompt, serialize_record, with_answer, PromptSpec, RenderOptions, Template};

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

#[test]
fn adult_prompt_matches_golden_file() {
    let start = Instant::now();
    let schema = Schema::load(repo().join("configs/adult/schema.toml")).unwrap();
    let template = Template::load(repo().join("configs/adult/template.toml")).unwrap();
    template.check(&schema).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("adult.csv");
    std::fs::write(
        &csv,
        "age,workclass,fnlwgt,education,education-num,marital-status,occupation,relationship,race,sex,capital-gain,capital-loss,hours-per-week,native-country,income\n\
         38,Private,215646,Prof-school,15,Never-married,Prof-specialty,Not-in-family,White,Female,0,0,50,United-States,>50K\n\
         28,Local-gov,336951,Assoc-acdm,12,Married-civ-spouse,Protective-serv,Husband,White,Male,0,0,40,United-States,>50K\n",
    )
    .unwrap();
    let d = load_csv(&csv, &schema).unwrap();

    let opts = RenderOptions::default();
    let demo = serialize_record(&d.records[0], &d.schema, &template, opts).unwrap();
    let query = serialize_record(&d.records[1], &d.schema, &template, opts).unwrap();
    let prompt = build_icl_prompt(&PromptSpec {
        instruction: template.instruction.clone(),
        demonstrations: vec![with_answer(demo, d.is_positive(&d.records[0]))],
        query,
        render_options: opts,
    })
    .unwrap();

    let golden = std::fs::read_to_string(repo().join("crates/core/tests/fixtures/adult_fig_prompt.txt")).unwrap();
    assert_eq!(prompt, golden);
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

use std::path::Path;

fn book() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src")
}

/// Bodies of the fenced blocks tagged `lang` in a chapter.
fn blocks(chapter: &str, lang: &str) -> Vec<String> {
    let text = std::fs::read_to_string(book().join(chapter)).unwrap();
    let mut out = Vec::new();
    let mut current: Option<String> = None;
    let mut nested = false;
    for line in text.lines() {
        if current.is_none() && line.trim_start().starts_with("````") {
            nested = !nested;
            continue;
        }
        if nested {
            continue;
        }
        match current.as_mut() {
            None if line.trim_start() == format!("```{lang}") => current = Some(String::new()),
            Some(body) if line.trim_start() == "```" => {
                out.push(std::mem::take(body));
                current = None;
            }
            Some(body) => {
                body.push_str(line);
                body.push('\n');
            }
            None => {}
        }
    }
    out
}

#[test]
fn every_listed_chapter_exists_and_is_compiled() {
    let summary = std::fs::read_to_string(book().join("SUMMARY.md")).unwrap();
    let lib = include_str!("../src/lib.rs");
    for link in summary.split("](").skip(1) {
        let file = &link[..link.find(')').unwrap()];
        assert!(book().join(file).exists(), "{file}");
        assert!(lib.contains(&format!("\"{file}\"")), "{file} is not doctested");
    }
}

#[test]
fn configuration_reference_parses() {
    let tomls = blocks("configuration.md", "toml");
    assert_eq!(tomls.len(), 1);
    let config: causal_themes_cli::config::Config = toml::from_str(&tomls[0]).unwrap();
    config.validate().unwrap();
    assert_eq!(config, causal_themes_cli::config::Config::default());
}

#[test]
fn json_examples_are_valid() {
    for chapter in ["themes.md", "quickstart.md"] {
        for block in blocks(chapter, "json") {
            serde_json::from_str::<serde_json::Value>(&block).unwrap_or_else(|e| panic!("{chapter}: {e}\n{block}"));
        }
    }
}

#[test]
fn edit_example_applies() {
    use causal_themes::themes::{parse_theme_json, ThemeEdit};
    let json = blocks("themes.md", "json");
    let themes = parse_theme_json(&json[0]).unwrap();
    let mut with_pol = themes.to_theme_json();
    with_pol.insert_str(
        with_pol.rfind(']').unwrap(),
        r#",{"theme_id":"POL","theme_name":"p","theme_description":"","theme_scale":[0,1]}"#,
    );
    let themes = parse_theme_json(&with_pol).unwrap();
    let edits: Vec<ThemeEdit> = serde_json::from_str(&json[1]).unwrap();
    let edited = themes.edit(&edits).unwrap();
    assert!(edited.get("POL").is_none() && edited.get("DAT").is_some());
}

//! Config assembly: defaults < file < experiment-implied < --set < --seed.

use std::fs;
use std::path::Path;

use flatmatch_core::{Error, Result, TrainConfig};

use crate::ExperimentKind;

/// Walk a dotted path, creating tables, and set the leaf.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for seg in &segments[..segments.len() - 1] {
        if !node.is_table() {
            return Err(Error::Config(format!("override path `{path}` crosses a non-table value")));
        }
        let table = node.as_table_mut().unwrap();
        node = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    match node.as_table_mut() {
        Some(table) => {
            table.insert(segments.last().unwrap().to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("override path `{path}` crosses a non-table value"))),
    }
}

/// Apply one `path = raw` override onto a TOML tree.
pub fn apply_override(root: &mut toml::Value, path: &str, raw: &str) -> Result<()> {
    set_path(root, path, parse_value(raw))
}

/// Parse the right-hand side of a `--set key=value` as a TOML literal,
/// falling back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    if let Ok(toml::Value::Table(mut t)) = doc.parse::<toml::Value>() {
        if let Some(v) = t.remove("v") {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

pub fn resolve_config(
    file: Option<&Path>,
    exp: ExperimentKind,
    sets: &[String],
    seed: Option<u64>,
) -> Result<TrainConfig> {
    let mut value: toml::Value = match file {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => toml::Value::Table(Default::default()),
    };

    match exp {
        ExperimentKind::FlatmatchE => {
            set_path(&mut value, "flatmatch.efficient", toml::Value::Boolean(true))?
        }
        ExperimentKind::FlatmatchFixlabel => {
            set_path(&mut value, "fixed_label.enabled", toml::Value::Boolean(true))?
        }
        _ => {}
    }

    for s in sets {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(seed) = seed {
        set_path(&mut value, "seed", toml::Value::Integer(seed as i64))?;
    }

    let cfg: TrainConfig =
        value.try_into().map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn precedence_is_cli_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "epochs = 7\n[flatmatch]\nrho = 0.2").unwrap();

        // defaults only
        let d = resolve_config(None, ExperimentKind::Flatmatch, &[], None).unwrap();
        assert_eq!(d.epochs, 200);

        // file overrides defaults
        let cfg = resolve_config(Some(&path), ExperimentKind::Flatmatch, &[], None).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.flatmatch.rho, 0.2);

        // command line overrides file
        let cfg = resolve_config(
            Some(&path),
            ExperimentKind::Flatmatch,
            &["flatmatch.rho=0.05".into(), "epochs=3".into()],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.flatmatch.rho, 0.05);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn experiment_implied_flags_apply() {
        let cfg = resolve_config(None, ExperimentKind::FlatmatchE, &[], None).unwrap();
        assert!(cfg.flatmatch.efficient);
        // explicit --set wins over the experiment default
        let cfg = resolve_config(
            None,
            ExperimentKind::FlatmatchE,
            &["flatmatch.efficient=false".into()],
            None,
        )
        .unwrap();
        assert!(!cfg.flatmatch.efficient);
    }

    #[test]
    fn unknown_fields_are_field_level_errors() {
        let err = resolve_config(None, ExperimentKind::Flatmatch, &["flatmatch.rhoo=0.1".into()], None)
            .unwrap_err()
            .to_string();
        assert!(err.contains("rhoo"), "{err}");
    }

    #[test]
    fn typed_and_string_values_parse() {
        let cfg = resolve_config(
            None,
            ExperimentKind::Flatmatch,
            &[
                "model.hidden_dims=[8, 4]".into(),
                "dataset.kind=\"blobs\"".into(),
                "dataset.num_classes=3".into(),
                "flatmatch.ema_convention=\"paper_literal\"".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.model.hidden_dims, vec![8, 4]);
        assert_eq!(cfg.dataset.num_classes, 3);
    }
}

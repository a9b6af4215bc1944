//! Flag/config-file merging and the small string grammars used on the
//! command line (functionals, bases, overrides).

use std::path::Path;

use accmv::data::{Dataset, Functional};
use accmv::glm::{Basis, ModelFamily};
use accmv::pattern::PatternPair;
use accmv::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Overlays the keys of `file` (top level, then the `[command]` table) onto
/// the parsed flags. File values win. Returns the resolved struct and its
/// JSON form for embedding in reports.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>, command: &str) -> Result<(T, Value)> {
    let mut merged = serde_json::to_value(&flags).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut layers = vec![table.clone()];
        if let Some(toml::Value::Table(section)) = table.get(command) {
            layers.push(section.clone());
        }
        let obj = merged.as_object_mut().expect("flag structs serialize to objects");
        for layer in layers {
            for (key, value) in layer {
                if value.is_table() && is_command(&key) {
                    continue;
                }
                if !obj.contains_key(&key) {
                    return Err(Error::Config(format!("unknown config field `{key}` for `{command}`")));
                }
                let json = serde_json::to_value(value).map_err(|e| Error::Config(e.to_string()))?;
                obj.insert(key, json);
            }
        }
    }
    let resolved: T = serde_json::from_value(merged.clone()).map_err(|e| Error::Config(format!("config: {e}")))?;
    Ok((resolved, merged))
}

fn is_command(key: &str) -> bool {
    matches!(
        key,
        "fit" | "regress" | "sensitivity" | "simulate" | "table" | "verify-oracles" | "verify_oracles"
    )
}

fn l_index(ds: &Dataset, name: &str) -> Result<usize> {
    ds.l_names()
        .iter()
        .position(|n| n == name.trim())
        .ok_or_else(|| Error::Config(format!("`{name}` is not a primary (L) column; have {:?}", ds.l_names())))
}

fn l_indices(ds: &Dataset, list: &str) -> Result<Vec<usize>> {
    list.split(',').map(|s| l_index(ds, s)).collect()
}

/// `Y3`, `mean:Y3,Y4`, `product:Y3,Y4` or `threshold:Y3<=1,Y4<=0.5`.
/// Without a spec, a single primary column is its own target.
pub fn parse_functional(spec: Option<&str>, ds: &Dataset) -> Result<Functional> {
    let Some(spec) = spec else {
        return if ds.d() == 1 {
            Ok(Functional::Coordinate(0))
        } else {
            Err(Error::Config(
                "--functional is required when there is more than one L column".into(),
            ))
        };
    };
    let f = match spec.split_once(':') {
        None => Functional::Coordinate(l_index(ds, spec)?),
        Some(("mean", rest)) => Functional::Average(l_indices(ds, rest)?),
        Some(("product", rest)) => Functional::Product(l_indices(ds, rest)?),
        Some(("threshold", rest)) => {
            let mut coords = Vec::new();
            let mut thresholds = Vec::new();
            for part in rest.split(',') {
                let (name, t) = part
                    .split_once("<=")
                    .ok_or_else(|| Error::Config(format!("threshold term `{part}` must look like NAME<=VALUE")))?;
                coords.push(l_index(ds, name)?);
                thresholds.push(
                    t.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("threshold `{t}` is not a number")))?,
                );
            }
            Functional::JointThreshold { coords, thresholds }
        }
        Some((kind, _)) => {
            return Err(Error::Config(format!(
                "unknown functional kind `{kind}` (expected mean, product or threshold)"
            )))
        }
    };
    f.validate(ds.d())?;
    Ok(f)
}

/// `affine`, `quadratic`, `intercept`, or `restricted[-quadratic]:NAME,...`
/// over any X or L columns.
pub fn parse_basis(spec: &str, ds: &Dataset) -> Result<Basis> {
    match spec.trim() {
        "affine" => return Ok(Basis::Affine),
        "quadratic" => return Ok(Basis::Quadratic),
        "intercept" | "intercept_only" | "intercept-only" => return Ok(Basis::InterceptOnly),
        _ => {}
    }
    let (kind, cols) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("unknown basis `{spec}`")))?;
    let quadratic = match kind {
        "restricted" => false,
        "restricted-quadratic" => true,
        other => return Err(Error::Config(format!("unknown basis `{other}`"))),
    };
    let (mut x, mut l) = (Vec::new(), Vec::new());
    for name in cols.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if let Some(j) = ds.x_names().iter().position(|n| n == name) {
            x.push(j);
        } else {
            l.push(l_index(ds, name)?);
        }
    }
    Ok(Basis::Restricted { x, l, quadratic })
}

/// Default basis plus `R,A=basis` overrides.
pub fn parse_family(default: &str, overrides: &[String], ds: &Dataset) -> Result<ModelFamily> {
    let mut family = ModelFamily::new(parse_basis(default, ds)?);
    for o in overrides {
        let (pair, basis) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` must look like R,A=basis")))?;
        let pair = PatternPair::parse(pair)?;
        if pair.r.len() != ds.p() || pair.a.len() != ds.d() {
            return Err(Error::Config(format!(
                "override pattern {pair} does not match p = {}, d = {}",
                ds.p(),
                ds.d()
            )));
        }
        family = family.with_override(pair, parse_basis(basis, ds)?);
    }
    Ok(family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use accmv::data::Record;

    fn ds() -> Dataset {
        let rec = Record::new(vec![Some(1.0)], vec![Some(1.0), Some(2.0)]).unwrap();
        Dataset::new(vec![rec], vec!["age".into()], vec!["a1c".into(), "bmi".into()]).unwrap()
    }

    #[test]
    fn functionals() {
        let ds = ds();
        assert!(matches!(
            parse_functional(Some("bmi"), &ds).unwrap(),
            Functional::Coordinate(1)
        ));
        assert!(
            matches!(parse_functional(Some("product:a1c,bmi"), &ds).unwrap(), Functional::Product(c) if c == vec![0, 1])
        );
        match parse_functional(Some("threshold:a1c<=6.5"), &ds).unwrap() {
            Functional::JointThreshold { coords, thresholds } => {
                assert_eq!(coords, vec![0]);
                assert_eq!(thresholds, vec![6.5]);
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_functional(None, &ds).is_err());
        assert!(parse_functional(Some("age"), &ds).is_err());
    }

    #[test]
    fn bases_and_overrides() {
        let ds = ds();
        assert_eq!(
            parse_basis("restricted:age", &ds).unwrap(),
            Basis::Restricted {
                x: vec![0],
                l: vec![],
                quadratic: false
            }
        );
        let fam = parse_family("affine", &["1,00=intercept".into()], &ds).unwrap();
        assert_eq!(
            fam.basis_for(&PatternPair::parse("1,00").unwrap()),
            &Basis::InterceptOnly
        );
        assert!(parse_family("affine", &["1,0=intercept".into()], &ds).is_err());
        assert!(parse_basis("cubic", &ds).is_err());
    }
}

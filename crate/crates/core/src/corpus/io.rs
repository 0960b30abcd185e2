use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::TargetRecord;
use crate::error::{Error, Result};
use crate::geometry::{Aabb, PointCloud};
use crate::partmodel::{Contact, Part, SourceShape};

pub const SCHEMA: &str = "rf-1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartRecord {
    #[serde(rename = "box")]
    bbox: Aabb,
    points: PointCloud,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShapeRecord {
    name: String,
    parts: Vec<PartRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contacts: Option<Vec<Contact>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatabaseFile {
    schema: String,
    shapes: Vec<ShapeRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetsFile {
    schema: String,
    targets: Vec<TargetRecord>,
}

#[derive(Deserialize)]
struct Header {
    schema: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value).expect("database serializes");
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads a schema-tagged document; an all-whitespace file is reported as an
/// empty database.
fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let parse = |location: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        location,
        message,
    };
    let header: Header =
        serde_json::from_str(&text).map_err(|e| parse("$".into(), e.to_string()))?;
    match header.schema.as_deref() {
        Some(SCHEMA) => {}
        found => {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: found.unwrap_or("<missing>").to_string(),
                expected: SCHEMA.to_string(),
            })
        }
    }
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let location = e.path().to_string();
        parse(location, e.into_inner().to_string())
    })
}

pub fn save_database(path: &Path, db: &[SourceShape]) -> Result<()> {
    let file = DatabaseFile {
        schema: SCHEMA.to_string(),
        shapes: db
            .iter()
            .map(|s| ShapeRecord {
                name: s.name.clone(),
                parts: s
                    .parts
                    .iter()
                    .map(|p| PartRecord {
                        bbox: p.bbox,
                        points: p.points.clone(),
                    })
                    .collect(),
                contacts: Some(s.constraint.contacts.clone()),
            })
            .collect(),
    };
    write_json(path, &file)
}

/// Loads shapes; contacts missing from a record are re-extracted with `tau`.
pub fn load_database(path: &Path, tau: f64) -> Result<Vec<SourceShape>> {
    let file: DatabaseFile = read_json(path)?;
    if file.shapes.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    file.shapes
        .into_iter()
        .map(|rec| {
            let parts = rec
                .parts
                .into_iter()
                .enumerate()
                .map(|(i, p)| Part::new(i, p.bbox, p.points))
                .collect::<Result<Vec<_>>>()?;
            match rec.contacts {
                Some(c) => SourceShape::with_contacts(rec.name, parts, c),
                None => SourceShape::new(rec.name, parts, tau),
            }
        })
        .collect()
}

pub fn save_targets(path: &Path, targets: &[TargetRecord]) -> Result<()> {
    write_json(
        path,
        &TargetsFile {
            schema: SCHEMA.to_string(),
            targets: targets.to_vec(),
        },
    )
}

pub fn load_targets(path: &Path) -> Result<Vec<TargetRecord>> {
    let file: TargetsFile = read_json(path)?;
    Ok(file.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_database, generate_targets, GenSpec};

    #[test]
    fn database_round_trip_is_bit_exact() {
        let db = generate_database(&GenSpec { points_per_shape: 64, seed: 4, ..Default::default() }, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("database.json");
        save_database(&path, &db).unwrap();
        let back = load_database(&path, 0.05).unwrap();
        assert_eq!(back.len(), db.len());
        for (a, b) in db.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.default_cloud(), b.default_cloud());
            assert_eq!(a.default_params, b.default_params);
            assert_eq!(a.constraint.contacts, b.constraint.contacts);
            assert_eq!(a.constraint.projector, b.constraint.projector);
        }
    }

    #[test]
    fn targets_round_trip() {
        let db = generate_database(&GenSpec { points_per_shape: 64, ..Default::default() }, 3).unwrap();
        let t = generate_targets(&db, 5, 0.5, 0.01, 0.1, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.json");
        save_targets(&path, &t).unwrap();
        assert_eq!(load_targets(&path).unwrap(), t);
    }

    #[test]
    fn missing_parts_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        fs::write(&path, r#"{"schema":"rf-1","shapes":[{"name":"a"}]}"#).unwrap();
        match load_database(&path, 0.05) {
            Err(Error::Parse { location, message, .. }) => {
                assert_eq!(location, "shapes[0]");
                assert!(message.contains("parts"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_versioned_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.json");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_database(&path, 0.05), Err(Error::EmptyDatabase)));
        fs::write(&path, r#"{"schema":"rf-1","shapes":[]}"#).unwrap();
        assert!(matches!(load_database(&path, 0.05), Err(Error::EmptyDatabase)));
        fs::write(&path, r#"{"schema":"rf-0","shapes":[]}"#).unwrap();
        assert!(matches!(load_database(&path, 0.05), Err(Error::VersionMismatch { .. })));
    }
}

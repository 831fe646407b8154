//! Dataset schema: task schemas, biomass labels, image records and the JSON
//! manifest that ties them together.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    classify_pixels, generate_synthetic_dataset, label_from_class_map, label_from_pixels,
    render_canopy, CanopyParams, DroneShift, SyntheticConfig, SyntheticDataset, Palette,
};

pub const MANIFEST_VERSION: u32 = 1;

/// Absolute tolerance on the sum of composition fractions.
pub const COMPOSITION_TOLERANCE: f64 = 1e-6;

/// Overrides the base directory used to resolve relative record paths.
pub const DATA_ROOT_ENV: &str = "HERBAGE_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemaName {
    Irish,
    Grassclover,
}

impl std::fmt::Display for SchemaName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SchemaName::Irish => "irish",
            SchemaName::Grassclover => "grassclover",
        })
    }
}

impl std::str::FromStr for SchemaName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "irish" => Ok(SchemaName::Irish),
            "grassclover" => Ok(SchemaName::Grassclover),
            other => Err(Error::Config(format!("unknown schema `{other}`"))),
        }
    }
}

/// Which quantities a dataset annotates and therefore which heads the
/// regressor carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSchema {
    pub name: SchemaName,
    pub composition_classes: Vec<String>,
    pub has_mass_head: bool,
    pub has_height_head: bool,
}

impl TaskSchema {
    pub fn irish() -> Self {
        Self {
            name: SchemaName::Irish,
            composition_classes: ["grass", "clover", "weeds"].map(String::from).to_vec(),
            has_mass_head: true,
            has_height_head: true,
        }
    }

    pub fn grassclover() -> Self {
        Self {
            name: SchemaName::Grassclover,
            composition_classes: ["grass", "white_clover", "red_clover", "weeds"]
                .map(String::from)
                .to_vec(),
            has_mass_head: false,
            has_height_head: false,
        }
    }

    pub fn from_name(name: SchemaName) -> Self {
        match name {
            SchemaName::Irish => Self::irish(),
            SchemaName::Grassclover => Self::grassclover(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.composition_classes.len()
    }

    /// Width of the encoded target vector: composition, then mass, then height.
    pub fn target_dim(&self) -> usize {
        self.n_classes() + self.has_mass_head as usize + self.has_height_head as usize
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.composition_classes.iter().position(|c| c == name)
    }
}

/// Ground truth for one image. Composition is ordered like the schema's
/// classes; drone records typically carry only the herbage mass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BiomassLabel {
    pub composition: Option<Vec<f64>>,
    /// kg DM/ha
    pub herbage_mass: Option<f64>,
    /// cm
    pub height: Option<f64>,
}

impl BiomassLabel {
    pub fn validate(&self, schema: &TaskSchema, record: &str) -> Result<()> {
        if let Some(comp) = &self.composition {
            if comp.len() != schema.n_classes() {
                return Err(Error::record(
                    record,
                    "label.composition",
                    format!(
                        "expected {} classes, got {}",
                        schema.n_classes(),
                        comp.len()
                    ),
                ));
            }
            for (name, &v) in schema.composition_classes.iter().zip(comp) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::record(
                        record,
                        &format!("label.composition.{name}"),
                        format!("fraction {v} outside [0, 1]"),
                    ));
                }
            }
            let sum: f64 = comp.iter().sum();
            if (sum - 1.0).abs() > COMPOSITION_TOLERANCE {
                return Err(Error::record(
                    record,
                    "label.composition",
                    format!("composition does not sum to 1 (sum = {sum})"),
                ));
            }
        }
        for (field, value) in [("label.herbage_mass", self.herbage_mass), ("label.height", self.height)] {
            if let Some(v) = value {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::record(record, field, format!("must be >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    /// True when every quantity the schema's heads predict is present.
    pub fn is_complete(&self, schema: &TaskSchema) -> bool {
        self.composition.is_some()
            && (!schema.has_mass_head || self.herbage_mass.is_some())
            && (!schema.has_height_head || self.height.is_some())
    }

    /// White plus red clover under the GrassClover schema, the clover fraction
    /// under the Irish one.
    pub fn total_clover(&self, schema: &TaskSchema) -> Option<f64> {
        let comp = self.composition.as_ref()?;
        match schema.name {
            SchemaName::Irish => schema.class_index("clover").map(|i| comp[i]),
            SchemaName::Grassclover => {
                let w = schema.class_index("white_clover")?;
                let r = schema.class_index("red_clover")?;
                Some(comp[w] + comp[r])
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Ground,
    Drone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub domain: Domain,
    /// Height above ground; required for drone records.
    pub altitude_m: Option<f64>,
    /// GPS altitude above sea level, the input to altitude annotation.
    pub altitude_asl_m: Option<f64>,
    /// (lat, lon) in degrees.
    pub gps: Option<(f64, f64)>,
    pub label: Option<BiomassLabel>,
}

impl ImageRecord {
    fn validate(&self, schema: &TaskSchema, require_altitude: bool) -> Result<()> {
        match (self.domain, self.altitude_m) {
            (Domain::Drone, None) if require_altitude => {
                return Err(Error::record(&self.id, "altitude_m", "missing altitude on drone record"));
            }
            (Domain::Drone, Some(a)) if !(a > 0.0 && a <= 100.0) => {
                return Err(Error::record(
                    &self.id,
                    "altitude_m",
                    format!("altitude {a} m outside (0, 100]"),
                ));
            }
            (Domain::Ground, Some(_)) => {
                return Err(Error::record(&self.id, "altitude_m", "ground records carry no altitude"));
            }
            _ => {}
        }
        if let Some((lat, lon)) = self.gps {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(Error::record(
                    &self.id,
                    "gps",
                    format!("coordinates ({lat}, {lon}) out of range"),
                ));
            }
        }
        if let Some(label) = &self.label {
            label.validate(schema, &self.id)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema: TaskSchema,
    pub records: Vec<ImageRecord>,
    /// Directory relative record paths are resolved against. Not serialized.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(schema: TaskSchema, records: Vec<ImageRecord>) -> Self {
        Self {
            schema,
            records,
            base_dir: PathBuf::from("."),
        }
    }

    /// Load and fully validate a manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::load_unchecked(path)?;
        m.validate()?;
        m.base_dir = base_dir_for(path);
        Ok(m)
    }

    /// Like [`Manifest::load`] but drone records may lack `altitude_m`; used
    /// before altitude annotation.
    pub fn load_unannotated(path: &Path) -> Result<Self> {
        let mut m = Self::load_unchecked(path)?;
        m.validate_with(false)?;
        m.base_dir = base_dir_for(path);
        Ok(m)
    }

    fn load_unchecked(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ManifestFile =
            serde_json::from_str(text).map_err(|e| Error::json("parsing manifest", e))?;
        if file.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported version {} (expected {MANIFEST_VERSION})",
                file.version
            )));
        }
        let schema = TaskSchema::from_name(file.schema);
        let records = file
            .records
            .into_iter()
            .map(|r| r.into_record(&schema))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(schema, records))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            schema: self.schema.name,
            records: self
                .records
                .iter()
                .map(|r| RecordFile::from_record(r, &self.schema))
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::json("writing manifest", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(true)
    }

    fn validate_with(&self, require_altitude: bool) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::record(&r.id, "id", "duplicate record id"));
            }
            r.validate(&self.schema, require_altitude)?;
        }
        Ok(())
    }

    /// Absolute (or base-relative) location of a record's image.
    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.base_dir.join(&record.path)
        }
    }

    pub fn by_domain(&self, domain: Domain) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.domain == domain)
    }
}

fn base_dir_for(path: &Path) -> PathBuf {
    if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
        if !root.is_empty() {
            return PathBuf::from(root);
        }
    }
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// Wire format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    schema: SchemaName,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    id: String,
    path: String,
    domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    altitude_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    altitude_asl_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gps: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<LabelFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    composition: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    herbage_mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<f64>,
}

impl RecordFile {
    fn into_record(self, schema: &TaskSchema) -> Result<ImageRecord> {
        let label = match self.label {
            None => None,
            Some(l) => {
                let composition = match l.composition {
                    None => None,
                    Some(map) => {
                        for key in map.keys() {
                            if schema.class_index(key).is_none() {
                                return Err(Error::record(
                                    &self.id,
                                    &format!("label.composition.{key}"),
                                    format!("unknown class for schema {}", schema.name),
                                ));
                            }
                        }
                        let mut comp = Vec::with_capacity(schema.n_classes());
                        for class in &schema.composition_classes {
                            match map.get(class) {
                                Some(&v) => comp.push(v),
                                None => {
                                    return Err(Error::record(
                                        &self.id,
                                        &format!("label.composition.{class}"),
                                        "missing class fraction",
                                    ))
                                }
                            }
                        }
                        Some(comp)
                    }
                };
                Some(BiomassLabel {
                    composition,
                    herbage_mass: l.herbage_mass,
                    height: l.height,
                })
            }
        };
        Ok(ImageRecord {
            id: self.id,
            path: PathBuf::from(self.path),
            domain: self.domain,
            altitude_m: self.altitude_m,
            altitude_asl_m: self.altitude_asl_m,
            gps: self.gps.map(|[lat, lon]| (lat, lon)),
            label,
        })
    }

    fn from_record(r: &ImageRecord, schema: &TaskSchema) -> Self {
        RecordFile {
            id: r.id.clone(),
            path: r.path.to_string_lossy().into_owned(),
            domain: r.domain,
            altitude_m: r.altitude_m,
            altitude_asl_m: r.altitude_asl_m,
            gps: r.gps.map(|(lat, lon)| [lat, lon]),
            label: r.label.as_ref().map(|l| LabelFile {
                composition: l.composition.as_ref().map(|c| {
                    schema
                        .composition_classes
                        .iter()
                        .cloned()
                        .zip(c.iter().copied())
                        .collect()
                }),
                herbage_mass: l.herbage_mass,
                height: l.height,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_records() -> &'static str {
        r#"{
          "version": 1,
          "schema": "irish",
          "records": [
            {"id": "g1", "path": "g1.png", "domain": "ground",
             "label": {"composition": {"grass": 0.7, "clover": 0.2, "weeds": 0.1},
                       "herbage_mass": 1500.0, "height": 8.5}},
            {"id": "d1", "path": "d1.png", "domain": "drone", "altitude_m": 8.0,
             "gps": [52.0, -8.0], "label": {"herbage_mass": 1700.0}}
          ]
        }"#
    }

    #[test]
    fn parses_valid_manifest() {
        let m = Manifest::from_json(two_records()).unwrap();
        m.validate().unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].label.as_ref().unwrap().composition, Some(vec![0.7, 0.2, 0.1]));
        assert_eq!(m.records[1].gps, Some((52.0, -8.0)));
    }

    #[test]
    fn drone_without_altitude_names_record() {
        let text = two_records().replace(r#""altitude_m": 8.0,"#, "");
        let m = Manifest::from_json(&text).unwrap();
        let err = m.validate().unwrap_err().to_string();
        assert!(err.contains("d1"), "{err}");
        assert!(err.contains("altitude"), "{err}");
        // Allowed before annotation.
        m.validate_with(false).unwrap();
    }

    #[test]
    fn composition_must_sum_to_one() {
        let text = two_records().replace(r#""weeds": 0.1"#, r#""weeds": 0.0"#);
        let err = Manifest::from_json(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("composition does not sum to 1"), "{err}");
        assert!(err.contains("g1"), "{err}");
    }

    #[test]
    fn rejects_duplicates_unknown_classes_and_bad_versions() {
        let dup = two_records().replace(r#""id": "d1""#, r#""id": "g1""#);
        assert!(Manifest::from_json(&dup).unwrap().validate().is_err());

        let unknown = two_records().replace(r#""weeds": 0.1"#, r#""thistle": 0.1"#);
        assert!(Manifest::from_json(&unknown).is_err());

        let v2 = two_records().replace(r#""version": 1"#, r#""version": 2"#);
        assert!(Manifest::from_json(&v2).is_err());

        let ground_alt = two_records().replace(r#""domain": "ground","#, r#""domain": "ground", "altitude_m": 3.0,"#);
        assert!(Manifest::from_json(&ground_alt).unwrap().validate().is_err());

        let high = two_records().replace(r#""altitude_m": 8.0"#, r#""altitude_m": 150.0"#);
        assert!(Manifest::from_json(&high).unwrap().validate().is_err());

        let neg = two_records().replace("1500.0", "-3.0");
        assert!(Manifest::from_json(&neg).unwrap().validate().is_err());
    }

    #[test]
    fn save_load_is_byte_stable() {
        let m = Manifest::from_json(two_records()).unwrap();
        let once = m.to_json().unwrap();
        let twice = Manifest::from_json(&once).unwrap().to_json().unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn total_clover_sums_white_and_red() {
        let schema = TaskSchema::grassclover();
        let label = BiomassLabel {
            composition: Some(vec![0.5, 0.2, 0.2, 0.1]),
            ..Default::default()
        };
        assert!((label.total_clover(&schema).unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn schema_shapes() {
        let irish = TaskSchema::irish();
        assert_eq!(irish.target_dim(), 5);
        assert!(irish.has_mass_head && irish.has_height_head);
        let gc = TaskSchema::grassclover();
        assert_eq!(gc.target_dim(), 4);
        assert!(!gc.has_mass_head && !gc.has_height_head);
    }
}

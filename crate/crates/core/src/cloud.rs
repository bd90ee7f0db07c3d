//! Point clouds, the class vocabulary, and scan/label ingestion.
//!
//! Internally every cloud lives in a y-up frame: `x` and `z` span the ground
//! plane and `y` is height. KITTI-style scans are z-up and are swapped on the
//! way in (and back out when serialized).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Semantic class index into a [`ClassVocabulary`], or [`ClassId::IGNORE`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassId(pub u16);

impl ClassId {
    /// Reserved id for unlabeled or unmapped points. Excluded from losses and metrics.
    pub const IGNORE: ClassId = ClassId(u16::MAX);

    pub fn is_ignore(self) -> bool {
        self == Self::IGNORE
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ignore() {
            f.write_str("ignore")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f64>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point {
            x,
            y,
            z,
            intensity: None,
        }
    }

    pub fn with_intensity(mut self, intensity: f64) -> Self {
        self.intensity = Some(intensity);
        self
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// An ordered scan with optional per-point labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<ClassId>>,
    pub frame_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            labels: None,
            frame_id: String::new(),
        }
    }

    /// Build a labeled cloud, checking that every point has a label.
    pub fn labeled(points: Vec<Point>, labels: Vec<ClassId>) -> Result<Self> {
        PointCloud::new(points).attach_labels(labels)
    }

    pub fn with_frame_id(mut self, frame_id: impl Into<String>) -> Self {
        self.frame_id = frame_id.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Label of point `i`, `IGNORE` for unlabeled clouds.
    pub fn label(&self, i: usize) -> ClassId {
        self.labels.as_ref().map_or(ClassId::IGNORE, |l| l[i])
    }

    pub fn attach_labels(mut self, labels: Vec<ClassId>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::validation(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Checks finiteness of coordinates and label validity against `num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.is_finite()) {
            return Err(Error::validation(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.points.len() {
                return Err(Error::validation("label count differs from point count"));
            }
            if let Some(i) = labels
                .iter()
                .position(|l| !l.is_ignore() && l.index() >= num_classes)
            {
                return Err(Error::validation(format!(
                    "label {} of point {i} is outside the vocabulary",
                    labels[i]
                )));
            }
        }
        Ok(())
    }
}

/// Ordered list of class names. `ClassId(i)` names `names[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

pub const DEFAULT_CLASSES: [&str; 7] = [
    "vehicle",
    "person",
    "road",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

impl Default for ClassVocabulary {
    fn default() -> Self {
        ClassVocabulary {
            names: DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::validation("vocabulary is empty"));
        }
        if names.len() >= ClassId::IGNORE.0 as usize {
            return Err(Error::validation("too many classes"));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::validation(format!("duplicate class name `{n}`")));
            }
            if n == "ignore" {
                return Err(Error::validation("`ignore` is reserved"));
            }
        }
        Ok(ClassVocabulary { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ClassId) -> &str {
        if id.is_ignore() {
            "ignore"
        } else {
            &self.names[id.index()]
        }
    }

    /// Resolves a class name; `"ignore"` maps to [`ClassId::IGNORE`].
    pub fn id_of(&self, name: &str) -> Option<ClassId> {
        if name == "ignore" {
            return Some(ClassId::IGNORE);
        }
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| ClassId(i as u16))
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> {
        (0..self.names.len() as u16).map(ClassId)
    }
}

/// Raw dataset label id → common class. Ids missing from the table resolve to `IGNORE`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelRemap {
    mapping: BTreeMap<u32, ClassId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RemapFile {
    remap: BTreeMap<String, String>,
}

impl LabelRemap {
    pub fn new(mapping: BTreeMap<u32, ClassId>) -> Self {
        LabelRemap { mapping }
    }

    /// Maps `0..K` onto itself.
    pub fn identity(vocab: &ClassVocabulary) -> Self {
        LabelRemap {
            mapping: vocab.ids().map(|c| (c.0 as u32, c)).collect(),
        }
    }

    /// Parses a TOML table of the form
    ///
    /// ```toml
    /// [remap]
    /// 40 = "road"
    /// 0 = "ignore"
    /// ```
    pub fn from_toml(text: &str, vocab: &ClassVocabulary) -> Result<Self> {
        let file: RemapFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("remap table: {e}")))?;
        let mut mapping = BTreeMap::new();
        for (raw, name) in file.remap {
            let raw_id: u32 = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("remap key `{raw}` is not an integer")))?;
            let class = vocab
                .id_of(&name)
                .ok_or_else(|| Error::Config(format!("remap value `{name}` is not a class")))?;
            mapping.insert(raw_id, class);
        }
        Ok(LabelRemap { mapping })
    }

    pub fn resolve(&self, raw: u32) -> ClassId {
        self.mapping.get(&raw).copied().unwrap_or(ClassId::IGNORE)
    }
}

/// On-disk scan layouts understood by [`load_scan`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanFormat {
    /// Headerless little-endian `f32` quadruples `(x, y, z, intensity)`, z-up.
    KittiBin,
    /// `LDGSCAN1` container with labels, y-up.
    Native,
}

pub const NATIVE_MAGIC: &[u8; 8] = b"LDGSCAN1";
const KITTI_RECORD: usize = 16;
const NATIVE_RECORD: usize = 18;
const NATIVE_HEADER: usize = 16;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn frame_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn f32_at(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn load_scan(path: impl AsRef<Path>, format: ScanFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let cloud = match format {
        ScanFormat::KittiBin => decode_kitti(&bytes)?,
        ScanFormat::Native => decode_native(&bytes)?,
    };
    Ok(cloud.with_frame_id(frame_id_of(path)))
}

/// Decodes a KITTI velodyne buffer, mapping `(x, y, z)` z-up to `(x, z, y)` y-up.
pub fn decode_kitti(bytes: &[u8]) -> Result<PointCloud> {
    let whole = bytes.len() / KITTI_RECORD * KITTI_RECORD;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            reason: format!("trailing {} bytes after last record", bytes.len() - whole),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / KITTI_RECORD);
    for (i, rec) in bytes.chunks_exact(KITTI_RECORD).enumerate() {
        let [kx, ky, kz, r] = [0, 4, 8, 12].map(|o| f32_at(rec, o) as f64);
        let p = Point::new(kx, kz, ky).with_intensity(r);
        if !p.is_finite() {
            return Err(Error::validation(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

/// Inverse of [`decode_kitti`]. Coordinates are narrowed to `f32`; missing intensity is written as 0.
pub fn encode_kitti(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD);
    for p in &cloud.points {
        for v in [p.x, p.z, p.y, p.intensity.unwrap_or(0.0)] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_native(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < NATIVE_HEADER {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: "header truncated".into(),
        });
    }
    if &bytes[..8] != NATIVE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LDGSCAN1".into(),
        });
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = (count as u128) * NATIVE_RECORD as u128 + NATIVE_HEADER as u128;
    if (bytes.len() as u128) != expected {
        let complete = (bytes.len() - NATIVE_HEADER) / NATIVE_RECORD;
        return Err(Error::Format {
            offset: (NATIVE_HEADER + complete.min(count as usize) * NATIVE_RECORD) as u64,
            reason: format!(
                "header declares {count} points but body holds {} bytes",
                bytes.len() - NATIVE_HEADER
            ),
        });
    }
    let count = count as usize;
    let mut points = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (i, rec) in bytes[NATIVE_HEADER..].chunks_exact(NATIVE_RECORD).enumerate() {
        let [x, y, z, r] = [0, 4, 8, 12].map(|o| f32_at(rec, o) as f64);
        let p = Point {
            x,
            y,
            z,
            intensity: (!r.is_nan()).then_some(r),
        };
        if !p.is_finite() {
            return Err(Error::validation(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        points.push(p);
        labels.push(ClassId(u16::from_le_bytes([rec[16], rec[17]])));
    }
    Ok(PointCloud {
        points,
        labels: Some(labels),
        frame_id: String::new(),
    })
}

/// Serializes to the native container. Unlabeled clouds are written as all-`IGNORE`;
/// a missing intensity is stored as NaN.
pub fn encode_native(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(NATIVE_HEADER + cloud.len() * NATIVE_RECORD);
    out.extend_from_slice(NATIVE_MAGIC);
    out.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z, p.intensity.unwrap_or(f64::NAN)] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&cloud.label(i).0.to_le_bytes());
    }
    out
}

pub fn save_native(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_native(cloud)).map_err(|e| Error::io(path, e))
}

/// Reads a SemanticKITTI `.label` file: one `u32` per point, semantic id in the low 16 bits.
pub fn load_labels(path: impl AsRef<Path>, remap: &LabelRemap) -> Result<Vec<ClassId>> {
    let path = path.as_ref();
    decode_labels(&read_file(path)?, remap)
}

pub fn decode_labels(bytes: &[u8], remap: &LabelRemap) -> Result<Vec<ClassId>> {
    let whole = bytes.len() / 4 * 4;
    if whole != bytes.len() {
        return Err(Error::Format {
            offset: whole as u64,
            reason: "label file length is not a multiple of 4".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| {
            let raw = u32::from_le_bytes(b.try_into().unwrap());
            remap.resolve(raw & 0xFFFF)
        })
        .collect())
}

/// Round `v` through `f32`, matching what the on-disk formats preserve.
pub fn narrow(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kitti_record(v: [f32; 4]) -> Vec<u8> {
        v.iter().flat_map(|f| f.to_le_bytes()).collect()
    }

    #[test]
    fn kitti_single_record_swaps_axes() {
        let cloud = decode_kitti(&kitti_record([1.0, 2.0, 3.0, 0.5])).unwrap();
        assert_eq!(cloud.len(), 1);
        let p = cloud.points[0];
        assert_eq!((p.x, p.y, p.z, p.intensity), (1.0, 3.0, 2.0, Some(0.5)));
    }

    #[test]
    fn kitti_empty_and_truncated() {
        assert!(decode_kitti(&[]).unwrap().is_empty());
        let mut bytes = kitti_record([1.0, 2.0, 3.0, 0.5]);
        bytes.push(0);
        match decode_kitti(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn kitti_rejects_nan_with_index() {
        let mut bytes = kitti_record([0.0; 4]);
        bytes.extend(kitti_record([f32::NAN, 0.0, 0.0, 0.0]));
        let err = decode_kitti(&bytes).unwrap_err();
        assert!(err.to_string().contains("point 1"), "{err}");
    }

    #[test]
    fn labels_use_low_sixteen_bits() {
        let vocab = ClassVocabulary::default();
        let remap = LabelRemap::new(BTreeMap::from([(40, vocab.id_of("road").unwrap())]));
        let bytes: Vec<u8> = [0x0000_0028u32, 0x0001_0028, 0x0000_0007]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let labels = decode_labels(&bytes, &remap).unwrap();
        assert_eq!(labels, vec![ClassId(2), ClassId(2), ClassId::IGNORE]);
        assert!(matches!(
            decode_labels(&bytes[..5], &remap),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn attach_labels_checks_length() {
        let pts = vec![Point::new(0.0, 0.0, 0.0); 3];
        assert!(PointCloud::new(pts.clone())
            .attach_labels(vec![ClassId(0); 3])
            .is_ok());
        assert!(PointCloud::new(pts).attach_labels(vec![ClassId(0); 2]).is_err());
        let empty = PointCloud::new(vec![]).attach_labels(vec![]).unwrap();
        assert_eq!(empty.labels.as_deref(), Some(&[][..]));
    }

    #[test]
    fn default_vocabulary_order() {
        let v = ClassVocabulary::default();
        assert_eq!(v.len(), 7);
        assert_eq!(v.names()[0], "vehicle");
        assert_eq!(v.names()[6], "vegetation");
        assert_eq!(v.id_of("road"), Some(ClassId(2)));
        assert!(ClassVocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn remap_from_toml() {
        let vocab = ClassVocabulary::default();
        let remap = LabelRemap::from_toml("[remap]\n40 = \"road\"\n0 = \"ignore\"\n", &vocab).unwrap();
        assert_eq!(remap.resolve(40), ClassId(2));
        assert_eq!(remap.resolve(0), ClassId::IGNORE);
        assert_eq!(remap.resolve(9999), ClassId::IGNORE);
        assert!(LabelRemap::from_toml("[remap]\n40 = \"lane\"\n", &vocab).is_err());
    }

    #[test]
    fn identity_remap_is_idempotent() {
        let vocab = ClassVocabulary::default();
        let id = LabelRemap::identity(&vocab);
        for c in vocab.ids() {
            assert_eq!(id.resolve(id.resolve(c.0 as u32).0 as u32), c);
        }
    }

    #[test]
    fn native_header_checks() {
        assert!(matches!(
            decode_native(b"LDGSCAN0\0\0\0\0\0\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
        let cloud = PointCloud::labeled(
            vec![Point::new(1.0, 2.0, 3.0), Point::new(-1.0, 0.5, 0.25).with_intensity(0.5)],
            vec![ClassId(3), ClassId::IGNORE],
        )
        .unwrap();
        let bytes = encode_native(&cloud);
        assert_eq!(bytes.len(), 16 + 2 * 18);
        assert_eq!(decode_native(&bytes).unwrap(), cloud);
        assert!(matches!(
            decode_native(&bytes[..bytes.len() - 1]),
            Err(Error::Format { offset: 34, .. })
        ));
    }
}

//! On-disk formats: text labels, binary point clouds, checkpoints and the
//! dataset directory layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/lidar/000000.bin   f32 LE records: x y z intensity
//! <dir>/radar/000000.bin   f32 LE records: x y z v_rel v_abs rcs
//! <dir>/label/000000.txt   one `Class x y z l w h theta moving` per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geom::Box7;
use crate::scene::{Annotation, LidarPoint, ObjectClass, ObjectSpec, RadarPoint, SceneFrame};

const LABEL_FIELDS: [&str; 9] = ["class", "x", "y", "z", "l", "w", "h", "theta", "moving"];

/// Parses one label line. `line` is 1-based and only used in errors.
pub fn parse_label_line(line: usize, text: &str) -> Result<Annotation> {
    let parse_err = |field: &str, reason: String| Error::Parse { line, field: field.to_string(), reason };
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != LABEL_FIELDS.len() {
        let field = LABEL_FIELDS.get(fields.len()).copied().unwrap_or("moving");
        return Err(parse_err(field, format!("expected {} fields, found {}", LABEL_FIELDS.len(), fields.len())));
    }
    let class =
        ObjectClass::from_name(fields[0]).map_err(|_| parse_err("class", format!("unknown class `{}`", fields[0])))?;
    let mut v = [0.0; 7];
    for (i, slot) in v.iter_mut().enumerate() {
        let name = LABEL_FIELDS[i + 1];
        let x: f64 =
            fields[i + 1].parse().map_err(|_| parse_err(name, format!("`{}` is not a number", fields[i + 1])))?;
        if !x.is_finite() {
            return Err(parse_err(name, format!("`{}` is not finite", fields[i + 1])));
        }
        *slot = x;
    }
    let moving = match fields[8] {
        "0" => false,
        "1" => true,
        other => return Err(parse_err("moving", format!("`{other}` is not 0 or 1"))),
    };
    let bbox = Box7::from_array(v).map_err(|e| parse_err("box", e.to_string()))?;
    Ok(Annotation { class, bbox, moving })
}

/// Formats a label so that `parse_label_line` recovers it exactly.
pub fn format_label(a: &Annotation) -> String {
    let b = &a.bbox;
    format!("{} {} {} {} {} {} {} {} {}", a.class, b.x, b.y, b.z, b.l, b.w, b.h, b.theta, u8::from(a.moving))
}

/// Parses a label file; blank lines are skipped.
pub fn parse_labels(text: &str) -> Result<Vec<Annotation>> {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| parse_label_line(i + 1, l)).collect()
}

pub fn format_labels(anns: &[Annotation]) -> String {
    anns.iter().map(|a| format_label(a) + "\n").collect()
}

/// A fixed-width point record of `f32` fields.
pub trait CloudRecord: Sized {
    const FIELDS: usize;
    fn write_fields(&self, out: &mut Vec<f32>);
    fn from_fields(f: &[f32]) -> Self;
}

impl CloudRecord for LidarPoint {
    const FIELDS: usize = 4;
    fn write_fields(&self, out: &mut Vec<f32>) {
        out.extend([self.x, self.y, self.z, self.intensity].map(|v| v as f32));
    }
    fn from_fields(f: &[f32]) -> Self {
        Self { x: f[0].into(), y: f[1].into(), z: f[2].into(), intensity: f[3].into() }
    }
}

impl CloudRecord for RadarPoint {
    const FIELDS: usize = 6;
    fn write_fields(&self, out: &mut Vec<f32>) {
        out.extend([self.x, self.y, self.z, self.v_rel, self.v_abs, self.rcs].map(|v| v as f32));
    }
    fn from_fields(f: &[f32]) -> Self {
        Self {
            x: f[0].into(),
            y: f[1].into(),
            z: f[2].into(),
            v_rel: f[3].into(),
            v_abs: f[4].into(),
            rcs: f[5].into(),
        }
    }
}

pub fn encode_cloud<P: CloudRecord>(points: &[P]) -> Vec<u8> {
    let mut fields = Vec::with_capacity(points.len() * P::FIELDS);
    for p in points {
        p.write_fields(&mut fields);
    }
    fields.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_cloud<P: CloudRecord>(bytes: &[u8]) -> Result<Vec<P>> {
    let stride = P::FIELDS * 4;
    if !bytes.len().is_multiple_of(stride) {
        return Err(Error::Truncated { offset: bytes.len() - bytes.len() % stride, stride });
    }
    let mut fields = vec![0f32; P::FIELDS];
    Ok(bytes
        .chunks_exact(stride)
        .map(|rec| {
            for (f, b) in fields.iter_mut().zip(rec.chunks_exact(4)) {
                *f = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
            P::from_fields(&fields)
        })
        .collect())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cloud<P: CloudRecord>(path: &Path) -> Result<Vec<P>> {
    decode_cloud(&read_bytes(path)?)
}

pub fn write_cloud<P: CloudRecord>(path: &Path, points: &[P]) -> Result<()> {
    write_bytes(path, &encode_cloud(points))
}

pub fn read_labels(path: &Path) -> Result<Vec<Annotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text).map_err(|e| match e {
        Error::Parse { line, field, reason } => {
            Error::Parse { line, field, reason: format!("{reason} ({})", path.display()) }
        }
        other => other,
    })
}

pub fn write_labels(path: &Path, anns: &[Annotation]) -> Result<()> {
    write_bytes(path, format_labels(anns).as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    /// Frame ids, one set of files per id.
    pub frames: Vec<u64>,
}

fn frame_paths(dir: &Path, id: u64) -> [PathBuf; 3] {
    [
        dir.join("lidar").join(format!("{id:06}.bin")),
        dir.join("radar").join(format!("{id:06}.bin")),
        dir.join("label").join(format!("{id:06}.txt")),
    ]
}

pub fn write_frame(dir: &Path, frame: &SceneFrame) -> Result<()> {
    let [l, r, a] = frame_paths(dir, frame.frame_id);
    write_cloud(&l, &frame.lidar)?;
    write_cloud(&r, &frame.radar)?;
    write_labels(&a, &frame.annotations())
}

/// Reads one frame. Object velocities are not stored, so they load as zero
/// with the motion flag taken from the label.
pub fn read_frame(dir: &Path, id: u64, corridor: &crate::geom::Corridor) -> Result<SceneFrame> {
    let [l, r, a] = frame_paths(dir, id);
    let objects: Vec<ObjectSpec> = read_labels(&a)?
        .into_iter()
        .map(|a| ObjectSpec { class: a.class, bbox: a.bbox, moving: a.moving, velocity: [0.0; 3] })
        .collect();
    Ok(SceneFrame {
        frame_id: id,
        in_corridor: objects.iter().map(|o| corridor.contains(&o.bbox)).collect(),
        objects,
        lidar: read_cloud(&l)?,
        radar: read_cloud(&r)?,
        radar_origin: Vec::new(),
    })
}

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    write_bytes(&dir.join("manifest.json"), s.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    Ok(serde_json::from_slice(&read_bytes(&path)?)?)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FUSDETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights plus optimizer state after a given epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: AdamState,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                Error::Checkpoint(format!("unexpected end of data at byte {} (need {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.config_hash);
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_values(&mut out, t);
        }
        put_u64(&mut out, self.adam.step);
        for t in self.adam.m.iter().chain(&self.adam.v) {
            put_values(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let config_hash = r.string()?;
        let epoch = r.len()?;
        let count = r.len()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflows")))?;
            let t = Tensor::new(shape, r.values(n)?).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            params.add(name, t);
        }
        let step = r.u64()?;
        let mut moments = Vec::with_capacity(2 * count);
        for _ in 0..2 {
            for t in params.tensors() {
                moments.push(Tensor::new(t.shape().to_vec(), r.values(t.len())?)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let v = moments.split_off(count);
        Ok(Self { config_hash, epoch, params, adam: AdamState { step, m: moments, v } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_examples() {
        let a = parse_label_line(1, "Car 5.0 1.0 0.0 4.0 1.8 1.6 0.0 0").unwrap();
        assert_eq!(a.class, ObjectClass::Car);
        assert_eq!(a.bbox.to_array(), [5.0, 1.0, 0.0, 4.0, 1.8, 1.6, 0.0]);
        assert!(!a.moving);

        match parse_label_line(3, "Car 5.0 1.0") {
            Err(Error::Parse { line: 3, field, .. }) => assert_eq!(field, "z"),
            other => panic!("{other:?}"),
        }
        match parse_label_line(2, "Car 5.0 1.0 0.0 4.0 x 1.6 0.0 1") {
            Err(Error::Parse { line: 2, field, .. }) => assert_eq!(field, "w"),
            other => panic!("{other:?}"),
        }
        match parse_label_line(4, "Truck 5.0 1.0 0.0 4.0 1.8 1.6 0.0 1") {
            Err(Error::Parse { line: 4, field, .. }) => assert_eq!(field, "class"),
            other => panic!("{other:?}"),
        }
        assert!(parse_label_line(1, "Car 5 1 0 4 1.8 1.6 0 2").is_err());
        assert!(parse_label_line(1, "Car 5 1 0 -4 1.8 1.6 0 0").is_err());
        assert!(parse_label_line(1, "Car 5 1 0 4 1.8 1.6 0 0 9").is_err());
    }

    #[test]
    fn label_file_reports_line_numbers() {
        let text = "Car 5 1 0 4 1.8 1.6 0 0\n\nPedestrian 1 2\n";
        match parse_labels(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cloud_truncation_offset() {
        let pts = vec![LidarPoint { x: 1.0, y: 2.0, z: 3.0, intensity: 0.5 }; 3];
        let mut bytes = encode_cloud(&pts);
        assert_eq!(decode_cloud::<LidarPoint>(&bytes).unwrap(), pts);
        bytes.extend_from_slice(&[0u8; 7]);
        match decode_cloud::<LidarPoint>(&bytes) {
            Err(Error::Truncated { offset, stride }) => assert_eq!((offset, stride), (48, 16)),
            other => panic!("{other:?}"),
        }
        assert!(decode_cloud::<RadarPoint>(&[]).unwrap().is_empty());
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        let mut params = ParamStore::new();
        params.add("w", Tensor::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        let adam = AdamState::new(&params);
        let ck = Checkpoint { config_hash: "abc".into(), epoch: 2, params, adam };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}

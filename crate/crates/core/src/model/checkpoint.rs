//! `CIPM` model checkpoints.
//!
//! Layout, all integers and reals little-endian:
//!
//! ```text
//! magic "CIPM" | version u32 (=1) | kind u8 | flags u8
//! d_v u32 | d_t u32 | hidden u32 | classes u32 | rank u32 | alpha f64 | lambda f64
//! matrix count u32, then per matrix: rows u32 | cols u32 | rows·cols f64
//! ```
//!
//! Kind: 0 late, 1 early, 2 direct, 3 vision-only. Flags: bit 0 text
//! adapter present, bit 1 early fusion on real text, bit 2 projection
//! present, bit 3 vision adapter bias, bit 4 text adapter bias.
//!
//! Matrix order: vision adapter (W, A, B, bias?), text adapter (same),
//! then the head. Late: h_t (W, b), h_v, h_d (W1, b1, W2, b2), g.
//! Early: h_d, classifier. Direct: h_v, projection. Vision-only: h_v.

use std::fs;
use std::path::Path;

use super::clipit::{ClipItModel, Head, ModelDims, ModelKind};
use super::layers::{Affine, LoraLinear, Mlp};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

pub const MODEL_MAGIC: [u8; 4] = *b"CIPM";
pub const MODEL_VERSION: u32 = 1;

const HAS_TEXT: u8 = 1;
const REAL_TEXT: u8 = 2;
const HAS_PROJECTION: u8 = 4;
const VISION_BIAS: u8 = 8;
const TEXT_BIAS: u8 = 16;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) {
    put_u32(out, m.rows());
    put_u32(out, m.cols());
    for &x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn head_matrices(head: &Head) -> Vec<&Matrix> {
    match head {
        Head::Late { h_t, h_v, h_d, g } => {
            let mut v = h_t.params();
            v.extend(h_v.params());
            v.extend(h_d.params());
            v.extend(g.params());
            v
        }
        Head::Early { h_d, classifier, .. } => {
            let mut v = h_d.params();
            v.extend(classifier.params());
            v
        }
        Head::Direct { h_v, projection } => {
            let mut v = h_v.params();
            if let Some(p) = projection {
                v.extend(p.params());
            }
            v
        }
        Head::VisionOnly { h_v } => h_v.params(),
    }
}

pub fn to_bytes(model: &ClipItModel) -> Vec<u8> {
    let dims = model.dims();
    let mut flags = 0u8;
    if let Some(f_t) = model.text_adapter() {
        flags |= HAS_TEXT;
        if f_t.bias().is_some() {
            flags |= TEXT_BIAS;
        }
    }
    if model.vision_adapter().bias().is_some() {
        flags |= VISION_BIAS;
    }
    match model.head() {
        Head::Early { real_text: true, .. } => flags |= REAL_TEXT,
        Head::Direct { projection: Some(_), .. } => flags |= HAS_PROJECTION,
        _ => {}
    }
    let mut mats: Vec<&Matrix> = model.vision_adapter().parts();
    if let Some(f_t) = model.text_adapter() {
        mats.extend(f_t.parts());
    }
    mats.extend(head_matrices(model.head()));

    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(model.kind().code());
    out.push(flags);
    for d in [dims.d_v, dims.d_t, dims.hidden, dims.classes, dims.rank] {
        put_u32(&mut out, d);
    }
    out.extend_from_slice(&dims.alpha.to_le_bytes());
    out.extend_from_slice(&model.lambda().to_le_bytes());
    put_u32(&mut out, mats.len());
    for m in mats {
        put_matrix(&mut out, m);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedFile(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32("matrix rows")?;
        let cols = self.u32("matrix cols")?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or(Error::TruncatedFile("matrix data"))?;
        let raw = self.take(n * 8, "matrix data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data)
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ClipItModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            expected: MODEL_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")? as u32;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = ModelKind::from_code(r.take(1, "kind")?[0])?;
    let flags = r.take(1, "flags")?[0];
    if flags & !(HAS_TEXT | REAL_TEXT | HAS_PROJECTION | VISION_BIAS | TEXT_BIAS) != 0 {
        return Err(Error::InvalidCheckpoint(format!("unknown flag bits {flags:#04x}")));
    }
    let dims = ModelDims {
        d_v: r.u32("d_v")?,
        d_t: r.u32("d_t")?,
        hidden: r.u32("hidden")?,
        classes: r.u32("classes")?,
        rank: r.u32("rank")?,
        alpha: r.f64("alpha")?,
    };
    let lambda = r.f64("lambda")?;
    let count = r.u32("matrix count")?;
    let mut mats = Vec::new();
    for _ in 0..count {
        mats.push(r.matrix()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidCheckpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut it = mats.into_iter();
    let mut next = || it.next().ok_or_else(|| Error::InvalidCheckpoint("too few matrices".into()));
    let lora = |bias: bool, next: &mut dyn FnMut() -> Result<Matrix>| -> Result<LoraLinear> {
        let (w, a, b) = (next()?, next()?, next()?);
        let bias = if bias { Some(next()?) } else { None };
        LoraLinear::new(w, a, b, bias, dims.alpha)
    };
    let f_v = lora(flags & VISION_BIAS != 0, &mut next)?;
    let f_t = if flags & HAS_TEXT != 0 {
        Some(lora(flags & TEXT_BIAS != 0, &mut next)?)
    } else {
        None
    };
    let affine = |next: &mut dyn FnMut() -> Result<Matrix>| -> Result<Affine> {
        let w = next()?;
        Affine::new(w, next()?)
    };
    let head = match kind {
        ModelKind::Late => {
            let h_t = affine(&mut next)?;
            let h_v = affine(&mut next)?;
            let h_d = Mlp::new(affine(&mut next)?, affine(&mut next)?)?;
            let g = affine(&mut next)?;
            Head::Late { h_t, h_v, h_d, g }
        }
        ModelKind::Early => Head::Early {
            h_d: Mlp::new(affine(&mut next)?, affine(&mut next)?)?,
            classifier: affine(&mut next)?,
            real_text: flags & REAL_TEXT != 0,
        },
        ModelKind::Direct => Head::Direct {
            h_v: affine(&mut next)?,
            projection: if flags & HAS_PROJECTION != 0 {
                Some(affine(&mut next)?)
            } else {
                None
            },
        },
        ModelKind::VisionOnly => Head::VisionOnly {
            h_v: affine(&mut next)?,
        },
    };
    if next().is_ok() {
        return Err(Error::InvalidCheckpoint("too many matrices".into()));
    }
    ClipItModel::from_parts(dims, lambda, f_v, f_t, head)
        .map_err(|e| Error::InvalidCheckpoint(e.to_string()))
}

pub fn save(model: &ClipItModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ClipItModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

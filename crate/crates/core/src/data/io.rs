use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"FSCT";
pub const VERSION: u8 = 1;

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

/// Header, then the payload as little-endian `f64` in row-major order.
pub fn write_tensor<W: Write>(w: &mut W, tensor: &Tensor) -> Result<()> {
    let rank = u8::try_from(tensor.shape().len())
        .map_err(|_| Error::usage(format!("rank {} exceeds 255", tensor.shape().len())))?;
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, rank])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| Error::usage(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Byte-counting reader so format errors can report where they happened.
struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    /// `Ok(false)` on a clean end of stream before the first byte.
    fn fill(&mut self, buf: &mut [u8], allow_eof: bool) -> Result<bool> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    if read == 0 && allow_eof {
                        return Ok(false);
                    }
                    return Err(format_err(
                        self.offset,
                        format!("unexpected end of data, field needs {} bytes, {read} left", buf.len()),
                    ));
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn read_tensor(&mut self) -> Result<Option<Tensor>> {
        let start = self.offset;
        let mut magic = [0u8; 4];
        if !self.fill(&mut magic, true)? {
            return Ok(None);
        }
        if &magic != MAGIC {
            return Err(format_err(start, format!("bad magic {magic:?}, expected \"FSCT\"")));
        }
        let mut vr = [0u8; 2];
        self.fill(&mut vr, false)?;
        if vr[0] != VERSION {
            return Err(format_err(start + 4, format!("unsupported version {}", vr[0])));
        }
        let rank = vr[1] as usize;
        if rank == 0 {
            return Err(format_err(start + 5, "rank 0 tensors are not supported"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let at = self.offset;
            let mut b = [0u8; 4];
            self.fill(&mut b, false)?;
            let d = u32::from_le_bytes(b) as usize;
            if d == 0 {
                return Err(format_err(at, "zero-length dimension"));
            }
            numel = numel
                .checked_mul(d)
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| format_err(at, "shape overflows"))?;
            shape.push(d);
        }
        let mut data = Vec::with_capacity(numel.min(1 << 24));
        let mut b = [0u8; 8];
        for _ in 0..numel {
            self.fill(&mut b, false)?;
            data.push(f64::from_le_bytes(b));
        }
        Tensor::new(shape, data).map(Some).map_err(|e| format_err(start, e.to_string()))
    }
}

/// Reads one tensor; `None` at a clean end of stream.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<Option<Tensor>> {
    Cursor { inner: r, offset: 0 }.read_tensor()
}

fn read_all<R: Read>(r: R) -> Result<Vec<Tensor>> {
    let mut cursor = Cursor { inner: r, offset: 0 };
    let mut out = Vec::new();
    while let Some(t) = cursor.read_tensor()? {
        out.push(t);
    }
    Ok(out)
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<()> {
    save_tensors(path, std::slice::from_ref(tensor))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut tensors = load_tensors(path)?;
    match tensors.len() {
        1 => Ok(tensors.pop().unwrap()),
        n => Err(format_err(0, format!("expected exactly one tensor, found {n}"))),
    }
}

/// Records back to back; used for checkpoints.
pub fn save_tensors(path: impl AsRef<Path>, tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in tensors {
        write_tensor(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    read_all(BufReader::new(File::open(path)?))
}

/// Images as one `[N, C, H, W]` record, followed by a `[N]` label record
/// when labeled.
pub fn save_corpus(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let mut shape = vec![corpus.len()];
    shape.extend_from_slice(corpus.image_shape());
    let data = corpus.images().iter().flat_map(|t| t.data().iter().copied()).collect();
    let mut records = vec![Tensor::new(shape, data)?];
    if let Some(labels) = corpus.labels() {
        records.push(Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())?);
    }
    save_tensors(path, &records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let records = load_tensors(path)?;
    let (images, labels) = match records.as_slice() {
        [images] => (images, None),
        [images, labels] => (images, Some(labels)),
        _ => return Err(format_err(0, format!("corpus file holds {} records, expected 1 or 2", records.len()))),
    };
    if images.shape().len() != 4 {
        return Err(format_err(0, format!("corpus images must be [N, C, H, W], got {:?}", images.shape())));
    }
    let n = images.shape()[0];
    let per = images.numel() / n;
    let img_shape = &images.shape()[1..];
    let tensors = images
        .data()
        .chunks(per)
        .map(|chunk| Tensor::new(img_shape.to_vec(), chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let labels = match labels {
        None => None,
        Some(l) => {
            if l.data().iter().any(|v| !(v.fract() == 0.0 && *v >= 0.0)) {
                return Err(format_err(0, "labels must be nonnegative integers"));
            }
            Some(l.data().iter().map(|&v| v as usize).collect())
        }
    };
    Corpus::new(tensors, labels)
}

/// Whitespace-separated header token, skipping `#` comments.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(format_err(start as u64, "truncated PPM header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Binary P6 with maxval 255 into a `[3, H, W]` tensor; a byte `v` maps to `v / 255`.
pub fn read_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = ppm_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(format_err(0, format!("expected P6, found {magic:?}")));
    }
    let mut dims = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        let at = pos as u64;
        let tok = ppm_token(bytes, &mut pos)?;
        dims[i] = tok
            .parse()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format_err(at, format!("invalid PPM {name} {tok:?}")))?;
    }
    let [width, height, maxval] = dims;
    if maxval != 255 {
        return Err(format_err(pos as u64, format!("maxval {maxval} unsupported, only 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(pos as u64, "missing whitespace after PPM header"));
    }
    pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| format_err(pos as u64, "PPM dimensions overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format_err(
            bytes.len() as u64,
            format!("PPM raster has {} bytes, expected {need}", raster.len()),
        ));
    }
    let mut data = vec![0.0; need];
    for (i, &b) in raster[..need].iter().enumerate() {
        let (pixel, channel) = (i / 3, i % 3);
        data[channel * width * height + pixel] = f64::from(b) / 255.0;
    }
    Tensor::new(vec![3, height, width], data)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_ppm(&std::fs::read(path)?)
}

/// Inverse of [`read_ppm`], rounding each value to the nearest byte.
pub fn write_ppm<W: Write>(w: &mut W, image: &Tensor) -> Result<()> {
    let [3, h, wd] = image.shape() else {
        return Err(Error::usage(format!("PPM export needs [3, H, W], got {:?}", image.shape())));
    };
    let (h, wd) = (*h, *wd);
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let mut raster = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            raster.push((image.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&raster)?;
    Ok(())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(&mut w, image)?;
    w.flush()?;
    Ok(())
}

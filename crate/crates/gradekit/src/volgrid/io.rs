//! On-disk formats: the binary volume container and the cohort manifest.
//!
//! Volume container layout (all little-endian):
//! 12-byte magic + u32 version (16-byte header), dims as 3 x u32, spacing as
//! 3 x f32, a u32 dtype tag (1 = f32 scalar, 2 = u32 label), then the raw
//! voxel payload. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::{LabelVolume, SubjectClass, Volume};

const MAGIC: &[u8; 12] = b"GRADEKITVOL\0";
const VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const DTYPE_LABEL: u32 = 2;

pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, vol.dims(), vol.spacing(), DTYPE_F32)?;
    for v in vol.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, labels.dims(), [1.0; 3], DTYPE_LABEL)?;
    for v in labels.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(File::open(path)?);
    let (dims, spacing, dtype) = read_header(&mut r, path)?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "{}: expected scalar volume (dtype 1), found dtype {dtype}",
            path.display()
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("{}: truncated payload: {e}", path.display())))?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, data)
}

/// Loads a label volume; `n_labels` is recovered as the maximum stored label
/// (the container carries no separate count field).
pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let mut r = BufReader::new(File::open(path)?);
    let (dims, _spacing, dtype) = read_header(&mut r, path)?;
    if dtype != DTYPE_LABEL {
        return Err(Error::Format(format!(
            "{}: expected label volume (dtype 2), found dtype {dtype}",
            path.display()
        )));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("{}: truncated payload: {e}", path.display())))?;
    let data: Vec<u32> = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_labels = data.iter().copied().max().unwrap_or(0);
    LabelVolume::new(dims, data, n_labels)
}

fn write_header(w: &mut impl Write, dims: [usize; 3], spacing: [f32; 3], dtype: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidGeometry(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&dtype.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<([usize; 3], [f32; 3], u32)> {
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("{}: short header: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: bad magic, not a gradekit volume",
            path.display()
        )));
    }
    let version = read_u32(r, path)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported container version {version}",
            path.display()
        )));
    }
    let dims = [
        read_u32(r, path)? as usize,
        read_u32(r, path)? as usize,
        read_u32(r, path)? as usize,
    ];
    let spacing = [read_f32(r, path)?, read_f32(r, path)?, read_f32(r, path)?];
    let dtype = read_u32(r, path)?;
    Ok((dims, spacing, dtype))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("{}: short header: {e}", path.display())))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    Ok(f32::from_bits(read_u32(r, path)?))
}

/// One row of the cohort manifest table.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub image_path: String,
    pub labels_path: String,
    pub class: SubjectClass,
    pub age: f32,
    pub domain_id: String,
}

/// Comma-separated cohort manifest with a header row.
pub fn write_manifest(path: &Path, rows: &[SubjectRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "subject_id,image_path,labels_path,class,age,domain_id")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:.2},{}",
            r.subject_id, r.image_path, r.labels_path, r.class, r.age, r.domain_id
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if rec.len() != 6 {
            return Err(Error::Data(format!(
                "{}: manifest row has {} fields, expected 6",
                path.display(),
                rec.len()
            )));
        }
        rows.push(SubjectRecord {
            subject_id: rec[0].to_string(),
            image_path: rec[1].to_string(),
            labels_path: rec[2].to_string(),
            class: SubjectClass::parse(&rec[3])?,
            age: rec[4]
                .parse()
                .map_err(|e| Error::Data(format!("{}: bad age {:?}: {e}", path.display(), &rec[4])))?,
            domain_id: rec[5].to_string(),
        });
    }
    Ok(rows)
}

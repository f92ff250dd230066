//! On-disk formats: the NVOL volume container and the annotation CSV.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{CtVolume, NoduleAnnotation};
use crate::error::{Error, Result};

const NVOL_MAGIC: &[u8; 4] = b"NVOL";
const NVOL_VERSION: u32 = 1;

/// Serializes a volume: magic, version, dims (d,h,w), spacing (sz,sy,sx) mm,
/// origin (oz,oy,ox) mm, then voxels with x fastest. All fields little-endian.
pub fn write_nvol<W: Write>(v: &CtVolume, mut w: W) -> Result<()> {
    w.write_all(NVOL_MAGIC)?;
    w.write_u32::<LittleEndian>(NVOL_VERSION)?;
    let (d, h, wd) = v.dims();
    for extent in [d, h, wd] {
        w.write_u32::<LittleEndian>(extent as u32)?;
    }
    for s in v.spacing_mm() {
        w.write_f32::<LittleEndian>(s)?;
    }
    for o in v.origin_mm() {
        w.write_f32::<LittleEndian>(o)?;
    }
    for &x in v.voxels() {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

pub fn read_nvol<R: Read>(mut r: R) -> Result<CtVolume> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("volume header unreadable: {e}")))?;
    if &magic != NVOL_MAGIC {
        return Err(Error::Format(format!("bad volume magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != NVOL_VERSION {
        return Err(Error::Format(format!(
            "unsupported volume version {version}, expected {NVOL_VERSION}"
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>()? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.read_f32::<LittleEndian>()?;
    }
    let mut origin = [0f32; 3];
    for o in &mut origin {
        *o = r.read_f32::<LittleEndian>()?;
    }
    let count = dims[0]
        .checked_mul(dims[1])
        .and_then(|p| p.checked_mul(dims[2]))
        .ok_or_else(|| Error::Format(format!("voxel count overflow for dims {dims:?}")))?;
    let mut voxels = vec![0f32; count];
    for x in &mut voxels {
        *x = r
            .read_f32::<LittleEndian>()
            .map_err(|e| Error::Corrupt(format!("volume payload truncated: {e}")))?;
    }
    CtVolume::new((dims[0], dims[1], dims[2]), spacing, origin, voxels)
}

/// Writes annotations with the conventional header
/// `seriesuid,coordX,coordY,coordZ,diameter_mm`. Internal (z,y,x) centers map
/// to the (X,Y,Z) columns.
pub fn write_annotations<W: Write>(annotations: &[NoduleAnnotation], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"])?;
    for a in annotations {
        out.write_record([
            a.series_id.as_str(),
            &a.center_mm[2].to_string(),
            &a.center_mm[1].to_string(),
            &a.center_mm[0].to_string(),
            &a.diameter_mm.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_annotations<R: Read>(r: R) -> Result<Vec<NoduleAnnotation>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    let expected = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];
    if headers.iter().ne(expected) {
        return Err(Error::Format(format!(
            "annotation header {headers:?}, expected {expected:?}"
        )));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f32> {
            record[i]
                .trim()
                .parse::<f32>()
                .map_err(|e| Error::Format(format!("annotation field {:?}: {e}", &record[i])))
        };
        let (x, y, z, d) = (field(1)?, field(2)?, field(3)?, field(4)?);
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Format(format!("non-positive nodule diameter {d}")));
        }
        out.push(NoduleAnnotation {
            series_id: record[0].to_string(),
            center_mm: [z, y, x],
            diameter_mm: d,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> CtVolume {
        let voxels: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
        CtVolume::new((2, 3, 4), [2.5, 0.7, 0.7], [-10.0, -5.0, 2.0], voxels).unwrap()
    }

    #[test]
    fn nvol_round_trip_is_exact() {
        let v = sample_volume();
        let mut buf = Vec::new();
        write_nvol(&v, &mut buf).unwrap();
        let back = read_nvol(buf.as_slice()).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing_mm(), v.spacing_mm());
        assert_eq!(back.origin_mm(), v.origin_mm());
        assert_eq!(back.voxels(), v.voxels());
    }

    #[test]
    fn nvol_rejects_bad_magic_and_version() {
        let v = sample_volume();
        let mut buf = Vec::new();
        write_nvol(&v, &mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_nvol(wrong.as_slice()), Err(Error::Format(_))));
        let mut newer = buf.clone();
        newer[4] = 9;
        assert!(matches!(read_nvol(newer.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn nvol_rejects_truncation() {
        let v = sample_volume();
        let mut buf = Vec::new();
        write_nvol(&v, &mut buf).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(read_nvol(buf.as_slice()), Err(Error::Corrupt(_))));
    }

    #[test]
    fn annotation_round_trip_swaps_axis_order() {
        let original = vec![
            NoduleAnnotation {
                series_id: "vol-000".into(),
                center_mm: [30.0, -12.5, 101.25],
                diameter_mm: 6.5,
            },
            NoduleAnnotation {
                series_id: "vol-001".into(),
                center_mm: [0.0, 0.0, 0.0],
                diameter_mm: 22.0,
            },
        ];
        let mut buf = Vec::new();
        write_annotations(&original, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "seriesuid,coordX,coordY,coordZ,diameter_mm");
        assert_eq!(lines.next().unwrap(), "vol-000,101.25,-12.5,30,6.5");
        let back = read_annotations(buf.as_slice()).unwrap();
        assert_eq!(back, original);
    }

    #[test]
    fn annotation_reader_rejects_foreign_headers() {
        let body = "id,x,y,z,d\nv,1,2,3,4\n";
        assert!(matches!(
            read_annotations(body.as_bytes()),
            Err(Error::Format(_))
        ));
    }
}

//! MetaImage-style volume files: a `Key = value` text header plus a raw
//! little-endian payload in x-fastest order.
//!
//! The reader is strict: exactly the six keys below are accepted, each once.
//!
//! ```text
//! NDims = 3
//! DimSize = 64 64 64
//! ElementSpacing = 1.5 1.5 1.5
//! Offset = -48 -48 -48
//! ElementType = MET_UCHAR
//! ElementDataFile = case_0_label.raw
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{ElementKind, Grid, LabelVolume, Volume, Voxel};

const KEYS: [&str; 6] = [
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementDataFile",
];

/// A volume of whichever element type the header declared.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    UInt8(Volume<u8>),
    Float32(Volume<f32>),
    Float64(Volume<f64>),
}

impl AnyVolume {
    pub fn kind(&self) -> ElementKind {
        match self {
            AnyVolume::UInt8(_) => ElementKind::UInt8,
            AnyVolume::Float32(_) => ElementKind::Float32,
            AnyVolume::Float64(_) => ElementKind::Float64,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            AnyVolume::UInt8(v) => v.grid(),
            AnyVolume::Float32(v) => v.grid(),
            AnyVolume::Float64(v) => v.grid(),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::UInt8(v) => Ok(v),
            other => Err(Error::UnsupportedElementType(format!(
                "{:?} where a UInt8 label volume was expected",
                other.kind()
            ))),
        }
    }

    /// Converts any element type to `f64` intensities.
    pub fn into_f64(self) -> Volume<f64> {
        match self {
            AnyVolume::UInt8(v) => Volume::from_parts(
                *v.grid(),
                v.data().iter().map(|&x| x as f64).collect(),
            ),
            AnyVolume::Float32(v) => Volume::from_parts(
                *v.grid(),
                v.data().iter().map(|&x| x as f64).collect(),
            ),
            AnyVolume::Float64(v) => v,
        }
    }
}

impl From<Volume<u8>> for AnyVolume {
    fn from(v: Volume<u8>) -> Self {
        AnyVolume::UInt8(v)
    }
}
impl From<Volume<f32>> for AnyVolume {
    fn from(v: Volume<f32>) -> Self {
        AnyVolume::Float32(v)
    }
}
impl From<Volume<f64>> for AnyVolume {
    fn from(v: Volume<f64>) -> Self {
        AnyVolume::Float64(v)
    }
}

fn met_name(kind: ElementKind) -> &'static str {
    match kind {
        ElementKind::UInt8 => "MET_UCHAR",
        ElementKind::Float32 => "MET_FLOAT",
        ElementKind::Float64 => "MET_DOUBLE",
    }
}

fn parse_kind(name: &str) -> Result<ElementKind> {
    match name {
        "MET_UCHAR" => Ok(ElementKind::UInt8),
        "MET_FLOAT" => Ok(ElementKind::Float32),
        "MET_DOUBLE" => Ok(ElementKind::Float64),
        other => Err(Error::UnsupportedElementType(other.to_string())),
    }
}

/// Parsed header fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub grid: Grid,
    pub kind: ElementKind,
    pub data_file: PathBuf,
}

impl Header {
    pub fn render(&self) -> String {
        let g = &self.grid;
        format!(
            "NDims = 3\nDimSize = {} {} {}\nElementSpacing = {} {} {}\nOffset = {} {} {}\nElementType = {}\nElementDataFile = {}\n",
            g.dims[0],
            g.dims[1],
            g.dims[2],
            g.spacing[0],
            g.spacing[1],
            g.spacing[2],
            g.offset[0],
            g.offset[1],
            g.offset[2],
            met_name(self.kind),
            self.data_file.display()
        )
    }

    pub fn parse(text: &str, path: &Path) -> Result<Header> {
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line `{line}` is not `Key = value`")))?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(malformed(format!("unknown key `{key}`")));
            }
            if fields.insert(key, value.trim()).is_some() {
                return Err(malformed(format!("duplicate key `{key}`")));
            }
        }
        for key in KEYS {
            if !fields.contains_key(key) {
                return Err(malformed(format!("missing key `{key}`")));
            }
        }

        if fields["NDims"] != "3" {
            return Err(malformed(format!("NDims must be 3, got `{}`", fields["NDims"])));
        }
        let triple = |key: &str| -> Result<[f64; 3]> {
            let parts: Vec<f64> = fields[key]
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| malformed(format!("{key}: {e}")))?;
            parts
                .try_into()
                .map_err(|_| malformed(format!("{key} needs exactly 3 values")))
        };
        let dims: Vec<usize> = fields["DimSize"]
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(format!("DimSize: {e}")))?;
        let dims: [usize; 3] = dims
            .try_into()
            .map_err(|_| malformed("DimSize needs exactly 3 values".into()))?;
        let grid = Grid::new(dims, triple("ElementSpacing")?, triple("Offset")?)?;
        let kind = parse_kind(fields["ElementType"])?;
        Ok(Header {
            grid,
            kind,
            data_file: PathBuf::from(fields["ElementDataFile"]),
        })
    }
}

/// Header path for a volume stem: `dir/name` → `dir/name.mhd`.
pub fn header_path(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "mhd") {
        path.to_path_buf()
    } else {
        let mut p = path.as_os_str().to_owned();
        p.push(".mhd");
        PathBuf::from(p)
    }
}

fn decode<T: Voxel>(grid: Grid, bytes: &[u8]) -> Result<Volume<T>> {
    let size = T::KIND.size();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Volume::new(grid, data)
}

/// Reads a header (`.mhd`) and its payload.
pub fn read_volume(path: impl AsRef<Path>) -> Result<AnyVolume> {
    let path = header_path(path.as_ref());
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header = Header::parse(&text, &path)?;
    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new(""))
        .join(&header.data_file);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.grid.len() * header.kind.size();
    if bytes.len() != expected {
        return Err(Error::SizeMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(match header.kind {
        ElementKind::UInt8 => AnyVolume::UInt8(decode(header.grid, &bytes)?),
        ElementKind::Float32 => AnyVolume::Float32(decode(header.grid, &bytes)?),
        ElementKind::Float64 => AnyVolume::Float64(decode(header.grid, &bytes)?),
    })
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    read_volume(path)?.into_labels()
}

/// Writes `<stem>.mhd` and `<stem>.raw` next to each other.
pub fn write_volume<T: Voxel>(v: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let header_file = header_path(path.as_ref());
    let raw_file = header_file.with_extension("raw");
    let raw_name = raw_file
        .file_name()
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidDocument(format!("bad path {}", header_file.display())))?;
    let header = Header {
        grid: *v.grid(),
        kind: T::KIND,
        data_file: raw_name,
    };
    let mut payload = Vec::with_capacity(v.data().len() * T::KIND.size());
    for &x in v.data() {
        x.write_le(&mut payload);
    }
    fs::write(&raw_file, payload).map_err(|e| Error::io(&raw_file, e))?;
    fs::write(&header_file, header.render()).map_err(|e| Error::io(&header_file, e))?;
    Ok(())
}

pub fn write_any(v: &AnyVolume, path: impl AsRef<Path>) -> Result<()> {
    match v {
        AnyVolume::UInt8(v) => write_volume(v, path),
        AnyVolume::Float32(v) => write_volume(v, path),
        AnyVolume::Float64(v) => write_volume(v, path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_pair(dir: &Path, header: &str, payload: &[u8]) -> PathBuf {
        let h = dir.join("v.mhd");
        fs::write(&h, header).unwrap();
        fs::write(dir.join("v.raw"), payload).unwrap();
        h
    }

    const HEADER_222: &str = "NDims = 3\nDimSize = 2 2 2\nElementSpacing = 1 1 1\nOffset = 0 0 0\nElementType = MET_UCHAR\nElementDataFile = v.raw\n";

    #[test]
    fn zero_payload_reads_as_background() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(dir.path(), HEADER_222, &[0; 8]);
        let v = read_labels(&h).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 0));
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(dir.path(), HEADER_222, &[0; 7]);
        assert!(matches!(
            read_volume(&h),
            Err(Error::SizeMismatch {
                expected: 8,
                actual: 7
            })
        ));
    }

    #[test]
    fn strict_keys() {
        let dir = tempfile::tempdir().unwrap();
        let unknown = format!("{HEADER_222}ObjectType = Image\n");
        let h = write_pair(dir.path(), &unknown, &[0; 8]);
        assert!(matches!(read_volume(&h), Err(Error::MalformedHeader { .. })));

        let missing = HEADER_222.replace("Offset = 0 0 0\n", "");
        let h = write_pair(dir.path(), &missing, &[0; 8]);
        assert!(matches!(read_volume(&h), Err(Error::MalformedHeader { .. })));

        let short = HEADER_222.replace("Offset = 0 0 0", "Offset = 0 0");
        let h = write_pair(dir.path(), &short, &[0; 8]);
        assert!(matches!(read_volume(&h), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn unsupported_element_type() {
        let dir = tempfile::tempdir().unwrap();
        let h = write_pair(
            dir.path(),
            &HEADER_222.replace("MET_UCHAR", "MET_SHORT"),
            &[0; 16],
        );
        assert!(matches!(
            read_volume(&h),
            Err(Error::UnsupportedElementType(_))
        ));
    }

    #[test]
    fn spacing_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([2, 2, 2], [1.5; 3], [0.0; 3]).unwrap();
        write_volume(&Volume::filled(g, 0u8).unwrap(), dir.path().join("s")).unwrap();
        let text = fs::read_to_string(dir.path().join("s.mhd")).unwrap();
        assert!(text.contains("ElementSpacing = 1.5 1.5 1.5\n"));
        assert!(text.contains("ElementDataFile = s.raw\n"));
    }

    #[test]
    fn payload_size_64_cubed() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([64, 64, 64], [1.0; 3], [0.0; 3]).unwrap();
        write_volume(&Volume::filled(g, 0u8).unwrap(), dir.path().join("big")).unwrap();
        assert_eq!(
            fs::metadata(dir.path().join("big.raw")).unwrap().len(),
            262_144
        );
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Grid::new([5, 4, 3], [0.7, 1.3, 2.9], [-12.25, 0.1, 3.3]).unwrap();
        let data: Vec<f32> = (0..g.len())
            .map(|_| rng.random_range(-1e3f32..1e3))
            .collect();
        let v = Volume::new(g, data).unwrap();
        write_volume(&v, dir.path().join("r")).unwrap();
        match read_volume(dir.path().join("r.mhd")).unwrap() {
            AnyVolume::Float32(back) => {
                assert_eq!(back.grid(), v.grid());
                let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
            }
            other => panic!("wrong kind {:?}", other.kind()),
        }
    }

    proptest::proptest! {
        #[test]
        fn f64_round_trip(
            vals in proptest::collection::vec(proptest::num::f64::NORMAL, 12),
            sp in proptest::array::uniform3(1e-3f64..1e3),
            off in proptest::array::uniform3(-1e4f64..1e4),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let v = Volume::new(Grid::new([3, 2, 2], sp, off).unwrap(), vals).unwrap();
            write_volume(&v, dir.path().join("p")).unwrap();
            let back = read_volume(dir.path().join("p")).unwrap();
            proptest::prop_assert_eq!(back, AnyVolume::Float64(v));
        }
    }
}

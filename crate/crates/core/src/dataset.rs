//! Feature-map files, synthetic sparse maps, canonical fixtures and the
//! brute-force window oracles.
//!
//! FMAP layout (all little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 0..4  | magic `FMAP` |
//! | 4..8  | version, `u32` = 1 |
//! | 8..20 | channels, height, width, `u32` each |
//! | 20..  | `channels*height*width` `f32`, channel-major, row-major |
//!
//! CSV layout: a `channels,height,width` header line, one line with those
//! three values, then one line per map row (channel-major).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::tensor::{conv_output_dims, im2col_extend, sparsity, ConvConfig, FeatureMap, Filter};
use crate::{Error, Result, Scalar};

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// 5×5 single-channel fixture with 8 nonzeros (sparsity 0.68).
pub fn fixture_f5<T: Scalar>() -> FeatureMap<T> {
    const ROWS: [[f32; 5]; 5] = [
        [1.0, 0.0, 0.0, 2.0, 0.0],
        [0.0, 0.0, 3.0, 0.0, 0.0],
        [0.0, 4.0, 0.0, 0.0, 5.0],
        [0.0, 0.0, 6.0, 0.0, 0.0],
        [7.0, 0.0, 0.0, 8.0, 0.0],
    ];
    FeatureMap::from_fn(1, 5, 5, |_, y, x| T::from_f32_lossy(ROWS[y][x])).expect("fixture shape")
}

/// 3×3 kernel with weights 1..=9 in row-major order.
pub fn fixture_k3<T: Scalar>() -> Filter<T> {
    Filter::from_fn(1, 3, 3, |_, i, j| T::from_f32_lossy((i * 3 + j + 1) as f32))
        .expect("fixture shape")
}

pub fn write_fmap<W: Write, T: Scalar>(mut w: W, map: &FeatureMap<T>) -> Result<()> {
    let dim = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Shape(format!("dimension {v} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * map.len());
    buf.extend_from_slice(&FMAP_MAGIC);
    buf.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    buf.extend_from_slice(&dim(map.channels())?);
    buf.extend_from_slice(&dim(map.height())?);
    buf.extend_from_slice(&dim(map.width())?);
    for v in map.values() {
        buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_fmap<R: Read>(mut r: R) -> Result<FeatureMap<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_fmap(&bytes)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader);
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FMAP_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != FMAP_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (channels, height, width) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let expected = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Shape("FMAP dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: payload.len(),
        });
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureMap::new(channels, height, width, values)
}

pub fn save<T: Scalar>(map: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_fmap(&mut buf, map)?;
    fs::write(path, buf).map_err(|e| Error::from(e).at_path(path))
}

/// Loads an FMAP file, or a CSV file when the extension is `.csv`.
pub fn load(path: impl AsRef<Path>) -> Result<FeatureMap<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).at_path(path))?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let parsed = if is_csv {
        read_csv(bytes.as_slice())
    } else {
        decode_fmap(&bytes)
    };
    parsed.map_err(|e| e.at_path(path))
}

pub fn write_csv<W: Write, T: Scalar>(w: W, map: &FeatureMap<T>) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(true).from_writer(w);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    out.write_record(["channels", "height", "width"])
        .map_err(csv_err)?;
    out.write_record([map.channels(), map.height(), map.width()].map(|v| v.to_string()))
        .map_err(csv_err)?;
    for row in map.values().chunks(map.width()) {
        out.write_record(row.iter().map(|v| v.to_f32_lossy().to_string()))
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<FeatureMap<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut records = reader.records();
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    let dims = records
        .next()
        .ok_or_else(|| Error::Csv("missing dimension line".into()))?
        .map_err(csv_err)?;
    let dims: Vec<usize> = dims
        .iter()
        .map(|f| {
            f.parse()
                .map_err(|_| Error::Csv(format!("bad dimension {f:?}")))
        })
        .collect::<Result<_>>()?;
    let [channels, height, width] = dims[..] else {
        return Err(Error::Csv(format!(
            "expected 3 dimensions, got {}",
            dims.len()
        )));
    };
    let mut values = Vec::with_capacity(channels * height * width);
    for (line, rec) in records.enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != width {
            return Err(Error::Csv(format!(
                "row {line} has {} cells, expected {width}",
                rec.len()
            )));
        }
        for cell in rec.iter() {
            values.push(
                cell.parse::<f32>()
                    .map_err(|_| Error::Csv(format!("bad value {cell:?} in row {line}")))?,
            );
        }
    }
    FeatureMap::new(channels, height, width, values)
}

/// Deterministic generator: xoshiro256** seeded through SplitMix64.
#[derive(Debug, Clone)]
pub struct MapRng(Xoshiro256StarStar);

impl MapRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform integer in `0..bound` by 128-bit multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }

    /// Uniform `f32` in `(0, 1]` on a 2^-24 grid.
    pub fn unit_open_closed(&mut self) -> f32 {
        1.0 - (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform `f32` in `[-1, 1)`.
    pub fn symmetric(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (2.0 / (1u32 << 24) as f32) - 1.0
    }
}

/// Synthetic map with exactly `floor(sparsity*N)` zeros.
///
/// Every element first draws a value in `(0, 1]`, then a Fisher-Yates shuffle
/// of the positions picks which ones become zero.
pub fn generate(
    height: usize,
    width: usize,
    channels: usize,
    sparsity: f64,
    seed: u64,
) -> Result<FeatureMap<f32>> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Config(format!(
            "sparsity {sparsity} is outside [0, 1]"
        )));
    }
    let n = channels * height * width;
    let mut rng = MapRng::new(seed);
    let mut values: Vec<f32> = (0..n).map(|_| rng.unit_open_closed()).collect();
    let zeros = ((sparsity * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        order.swap(i, j);
    }
    for &pos in &order[..zeros] {
        values[pos] = 0.0;
    }
    FeatureMap::new(channels, height, width, values)
}

/// Seeded filter with weights in `[-1, 1)`.
pub fn random_filter(channels: usize, k_h: usize, k_w: usize, seed: u64) -> Result<Filter<f32>> {
    let mut rng = MapRng::new(seed);
    Filter::from_fn(channels, k_h, k_w, |_, _, _| rng.symmetric())
}

/// Nonzero count of every convolution window (all channels), raster order.
///
/// Deliberately naive: indexes the map with `get` for every window element.
pub fn oracle_window_nnz<T: Scalar>(
    map: &FeatureMap<T>,
    k_h: usize,
    k_w: usize,
    stride: usize,
) -> Result<Vec<usize>> {
    let (o_w, o_h) = conv_output_dims(map.width(), map.height(), k_w, k_h, stride)?;
    let mut counts = Vec::with_capacity(o_w * o_h);
    for oy in 0..o_h {
        for ox in 0..o_w {
            let mut n = 0;
            for c in 0..map.channels() {
                for dy in 0..k_h {
                    for dx in 0..k_w {
                        if map.get(c, oy * stride + dy, ox * stride + dx) != T::zero() {
                            n += 1;
                        }
                    }
                }
            }
            counts.push(n);
        }
    }
    Ok(counts)
}

/// Raw sparsity and im2col-extended sparsity of a map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityProfile {
    pub raw: f64,
    pub im2col: f64,
}

pub fn sparsity_profile<T: Scalar>(
    maps: &[FeatureMap<T>],
    k_h: usize,
    k_w: usize,
    cfg: ConvConfig,
) -> Result<Vec<SparsityProfile>> {
    maps.iter()
        .map(|m| {
            Ok(SparsityProfile {
                raw: sparsity(m),
                im2col: im2col_extend(m, k_h, k_w, cfg)?.zero_fraction(),
            })
        })
        .collect()
}

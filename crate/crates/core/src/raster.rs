//! Per-map rasters and their on-disk encoding.
//!
//! All rasters persist as binary portable graymaps (P5):
//!
//! | raster      | maxval | pixel codes                                   |
//! |-------------|--------|-----------------------------------------------|
//! | filament    | 255    | 0 = no filament, 255 = filament               |
//! | polarity    | 255    | 0 = negative, 128 = PIL/unknown, 255 = positive |
//! | confidence  | 65535  | big-endian, linear map of [-1, 1] onto [0, 65535] |
//!
//! Reference points persist as text, one `row col polarity` triple per line,
//! with `#` starting a comment.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Provenance, ReferencePoint, ReferencePointSet};

/// Value domain of a raster pixel.
pub trait Pixel: Copy + PartialEq + std::fmt::Debug {
    fn check(self) -> std::result::Result<(), String>;
}

impl Pixel for bool {
    fn check(self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Pixel for i8 {
    fn check(self) -> std::result::Result<(), String> {
        match self {
            -1..=1 => Ok(()),
            v => Err(format!("polarity {v} not in {{-1, 0, 1}}")),
        }
    }
}

impl Pixel for f64 {
    fn check(self) -> std::result::Result<(), String> {
        if (-1.0..=1.0).contains(&self) {
            Ok(())
        } else {
            Err(format!("confidence {self} not in [-1, 1]"))
        }
    }
}

/// Row-major raster with a validated value domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// `true` marks a filament pixel.
pub type FilamentMask = Raster<bool>;
/// Values in {-1, 0, +1}; 0 marks PIL or unknown polarity.
pub type PolarityMap = Raster<i8>;
/// Values in [-1, 1]; sign is polarity, magnitude is confidence.
pub type ConfidenceMap = Raster<f64>;

impl<T: Pixel> Raster<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Size(format!(
                "raster dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::Size(format!(
                "{height}x{width} raster needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some((i, msg)) = data
            .iter()
            .enumerate()
            .find_map(|(i, v)| v.check().err().map(|m| (i, m)))
        {
            return Err(Error::Domain(format!(
                "pixel ({}, {}): {msg}",
                i / width,
                i % width
            )));
        }
        Ok(Raster {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    /// Panics if `value` is outside the raster's domain or the index is out of bounds.
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        if let Err(msg) = value.check() {
            panic!("{msg}");
        }
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn matches(&self, spec: &GridSpec) -> bool {
        self.height == spec.height && self.width == spec.width
    }
}

impl FilamentMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterKind {
    Filament,
    Polarity,
    Confidence,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnyRaster {
    Filament(FilamentMask),
    Polarity(PolarityMap),
    Confidence(ConfidenceMap),
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "missing P5 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, format!("expected {name}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        fields[k] = text
            .parse()
            .map_err(|_| Error::format(start, format!("{name} '{text}' out of range")))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => {
            return Err(Error::format(
                pos,
                "expected single whitespace after maxval",
            ))
        }
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("zero dimension {width}x{height}")));
    }
    Ok(Header {
        width,
        height,
        maxval,
        data_offset: pos,
    })
}

/// Decodes an in-memory P5 graymap as the requested raster kind.
pub fn decode(bytes: &[u8], kind: RasterKind) -> Result<AnyRaster> {
    let h = parse_header(bytes)?;
    let n = h
        .width
        .checked_mul(h.height)
        .ok_or_else(|| Error::format(2, "dimensions overflow"))?;
    let expected_maxval = match kind {
        RasterKind::Filament | RasterKind::Polarity => 255,
        RasterKind::Confidence => 65535,
    };
    if h.maxval != expected_maxval {
        return Err(Error::format(
            h.data_offset - 1,
            format!(
                "maxval {} invalid for {kind:?} raster, expected {expected_maxval}",
                h.maxval
            ),
        ));
    }
    let bytes_per = if expected_maxval > 255 { 2 } else { 1 };
    let body = &bytes[h.data_offset..];
    if body.len() < n * bytes_per {
        return Err(Error::format(
            bytes.len(),
            format!(
                "truncated pixel data: need {} bytes, have {}",
                n * bytes_per,
                body.len()
            ),
        ));
    }
    let bad = |i: usize, v: u16| {
        Error::format(
            h.data_offset + i * bytes_per,
            format!(
                "pixel ({}, {}) has value {v}, not valid for {kind:?} raster",
                i / h.width,
                i % h.width
            ),
        )
    };
    Ok(match kind {
        RasterKind::Filament => {
            let data = body[..n]
                .iter()
                .enumerate()
                .map(|(i, &v)| match v {
                    0 => Ok(false),
                    255 => Ok(true),
                    _ => Err(bad(i, v.into())),
                })
                .collect::<Result<Vec<_>>>()?;
            AnyRaster::Filament(Raster::new(h.height, h.width, data)?)
        }
        RasterKind::Polarity => {
            let data = body[..n]
                .iter()
                .enumerate()
                .map(|(i, &v)| match v {
                    0 => Ok(-1),
                    128 => Ok(0),
                    255 => Ok(1),
                    _ => Err(bad(i, v.into())),
                })
                .collect::<Result<Vec<_>>>()?;
            AnyRaster::Polarity(Raster::new(h.height, h.width, data)?)
        }
        RasterKind::Confidence => {
            let data = body[..2 * n]
                .chunks_exact(2)
                .map(|c| dequantize(u16::from_be_bytes([c[0], c[1]])))
                .collect();
            AnyRaster::Confidence(Raster::new(h.height, h.width, data)?)
        }
    })
}

fn quantize(v: f64) -> u16 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16
}

fn dequantize(q: u16) -> f64 {
    // symmetric so that -1, 0 (as 32767.5 rounds) and 1 map back into range
    (q as f64 / 65535.0) * 2.0 - 1.0
}

fn header(width: usize, height: usize, maxval: u32) -> Vec<u8> {
    format!("P5\n{width} {height}\n{maxval}\n").into_bytes()
}

impl AnyRaster {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            AnyRaster::Filament(r) => encode_filament(r),
            AnyRaster::Polarity(r) => encode_polarity(r),
            AnyRaster::Confidence(r) => encode_confidence(r),
        }
    }
}

pub fn encode_filament(r: &FilamentMask) -> Vec<u8> {
    let mut out = header(r.width, r.height, 255);
    out.extend(r.data.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn encode_polarity(r: &PolarityMap) -> Vec<u8> {
    let mut out = header(r.width, r.height, 255);
    out.extend(r.data.iter().map(|&v| match v {
        -1 => 0u8,
        0 => 128,
        _ => 255,
    }));
    out
}

pub fn encode_confidence(r: &ConfidenceMap) -> Vec<u8> {
    let mut out = header(r.width, r.height, 65535);
    for &v in &r.data {
        out.extend_from_slice(&quantize(v).to_be_bytes());
    }
    out
}

pub fn load_raster(path: impl AsRef<Path>, kind: RasterKind) -> Result<AnyRaster> {
    decode(&fs::read(path)?, kind)
}

pub fn load_filament(path: impl AsRef<Path>) -> Result<FilamentMask> {
    match load_raster(path, RasterKind::Filament)? {
        AnyRaster::Filament(r) => Ok(r),
        _ => unreachable!(),
    }
}

pub fn load_polarity(path: impl AsRef<Path>) -> Result<PolarityMap> {
    match load_raster(path, RasterKind::Polarity)? {
        AnyRaster::Polarity(r) => Ok(r),
        _ => unreachable!(),
    }
}

pub fn load_confidence(path: impl AsRef<Path>) -> Result<ConfidenceMap> {
    match load_raster(path, RasterKind::Confidence)? {
        AnyRaster::Confidence(r) => Ok(r),
        _ => unreachable!(),
    }
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_raster(raster: &AnyRaster, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &raster.encode())
}

pub fn save_filament(r: &FilamentMask, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_filament(r))
}

pub fn save_polarity(r: &PolarityMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_polarity(r))
}

pub fn save_confidence(r: &ConfidenceMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_confidence(r))
}

fn check_factor<T>(r: &Raster<T>, factor: usize) -> Result<()> {
    if factor == 0 || r.height % factor != 0 || r.width % factor != 0 {
        return Err(Error::Size(format!(
            "factor {factor} does not divide {}x{}",
            r.height, r.width
        )));
    }
    Ok(())
}

fn pool<T: Copy, U: Pixel>(
    r: &Raster<T>,
    factor: usize,
    reduce: impl Fn(&mut dyn Iterator<Item = T>) -> U,
) -> Result<Raster<U>> {
    check_factor(r, factor)?;
    let (h, w) = (r.height / factor, r.width / factor);
    let mut out = Vec::with_capacity(h * w);
    for br in 0..h {
        for bc in 0..w {
            let mut it = (0..factor).flat_map(|dr| {
                let row = br * factor + dr;
                let start = row * r.width + bc * factor;
                r.data[start..start + factor].iter().copied()
            });
            out.push(reduce(&mut it));
        }
    }
    Raster::new(h, w, out)
}

/// Logical-OR pooling over `factor x factor` blocks.
pub fn downsample_filament(mask: &FilamentMask, factor: usize) -> Result<FilamentMask> {
    pool(mask, factor, |it| {
        let mut any = false;
        for b in it {
            any |= b;
        }
        any
    })
}

/// Plurality vote over `factor x factor` blocks; ties resolve to 0.
pub fn downsample_polarity(map: &PolarityMap, factor: usize) -> Result<PolarityMap> {
    pool(map, factor, |it| {
        let mut counts = [0usize; 3];
        for v in it {
            counts[(v + 1) as usize] += 1;
        }
        let max = *counts.iter().max().unwrap();
        let winners: Vec<usize> = (0..3).filter(|&i| counts[i] == max).collect();
        if winners.len() == 1 {
            winners[0] as i8 - 1
        } else {
            0
        }
    })
}

/// Parses a reference-point text file body.
pub fn parse_reference_points(text: &str, spec: &GridSpec) -> Result<ReferencePointSet> {
    let mut points = Vec::new();
    let mut offset = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let line_offset = offset;
        offset += raw.len() + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::format(line_offset, format!("line {}: {msg}", lineno + 1));
        if fields.len() != 3 {
            return Err(err(format!("expected 'row col polarity', got '{line}'")));
        }
        let row = fields[0]
            .parse()
            .map_err(|_| err(format!("bad row '{}'", fields[0])))?;
        let col = fields[1]
            .parse()
            .map_err(|_| err(format!("bad col '{}'", fields[1])))?;
        let polarity = match fields[2] {
            "1" | "+1" => 1,
            "-1" => -1,
            other => return Err(err(format!("polarity '{other}' must be -1 or 1"))),
        };
        points.push(ReferencePoint { row, col, polarity });
    }
    ReferencePointSet::new(points, Provenance::File, spec)
}

pub fn format_reference_points(set: &ReferencePointSet) -> String {
    let mut out = String::from("# row col polarity\n");
    for p in set.points() {
        writeln!(out, "{} {} {}", p.row, p.col, p.polarity).unwrap();
    }
    out
}

pub fn load_reference_points(path: impl AsRef<Path>, spec: &GridSpec) -> Result<ReferencePointSet> {
    parse_reference_points(&fs::read_to_string(path)?, spec)
}

pub fn save_reference_points(set: &ReferencePointSet, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, format_reference_points(set).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graymap(w: usize, h: usize, maxval: u32, body: &[u8]) -> Vec<u8> {
        let mut b = header(w, h, maxval);
        b.extend_from_slice(body);
        b
    }

    #[test]
    fn decode_codes() {
        match decode(&graymap(1, 1, 255, &[255]), RasterKind::Filament).unwrap() {
            AnyRaster::Filament(r) => assert!(r.get(0, 0)),
            _ => panic!(),
        }
        match decode(&graymap(1, 1, 255, &[128]), RasterKind::Polarity).unwrap() {
            AnyRaster::Polarity(r) => assert_eq!(r.get(0, 0), 0),
            _ => panic!(),
        }
    }

    #[test]
    fn bad_polarity_code_names_pixel() {
        let err = decode(&graymap(2, 1, 255, &[0, 17]), RasterKind::Polarity).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pixel (0, 1)"), "{msg}");
        assert!(msg.contains("17"), "{msg}");
        assert!(
            matches!(err, Error::Format { offset, .. } if offset == header(2, 1, 255).len() + 1)
        );
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(
            decode(b"P6\n1 1\n255\n\0", RasterKind::Filament),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(decode(b"P5\n1\n", RasterKind::Filament).is_err());
        assert!(decode(&graymap(2, 2, 255, &[0, 0, 0]), RasterKind::Filament).is_err());
        assert!(decode(&graymap(1, 1, 255, &[0]), RasterKind::Confidence).is_err());
        assert!(decode(b"P5\n0 1\n255\n", RasterKind::Filament).is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1 # dims\n255\n\xff\x00";
        match decode(bytes, RasterKind::Filament).unwrap() {
            AnyRaster::Filament(r) => assert_eq!(r.data(), &[true, false]),
            _ => panic!(),
        }
    }

    #[test]
    fn polarity_round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.pgm");
        let map = PolarityMap::filled(4, 4, 1).unwrap();
        save_polarity(&map, &path).unwrap();
        assert_eq!(load_polarity(&path).unwrap(), map);
    }

    #[test]
    fn confidence_quantization_bound() {
        let map = ConfidenceMap::new(1, 4, vec![0.5, -1.0, 1.0, 0.0]).unwrap();
        let AnyRaster::Confidence(back) =
            decode(&encode_confidence(&map), RasterKind::Confidence).unwrap()
        else {
            panic!()
        };
        for (a, b) in map.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 65535.0, "{a} {b}");
        }
        assert_eq!(back.get(0, 1), -1.0);
        assert_eq!(back.get(0, 2), 1.0);
    }

    #[test]
    fn filament_round_trip_over_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let data = (0..h * w).map(|_| rng.gen_bool(0.3)).collect();
            let mask = FilamentMask::new(h, w, data).unwrap();
            let AnyRaster::Filament(back) =
                decode(&encode_filament(&mask), RasterKind::Filament).unwrap()
            else {
                panic!()
            };
            assert_eq!(back, mask);
        }
    }

    #[test]
    fn or_pooling_block() {
        let m = FilamentMask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(downsample_filament(&m, 2).unwrap().data(), &[true]);
    }

    #[test]
    fn plurality_tie_is_unknown() {
        let m = PolarityMap::new(2, 2, vec![1, 1, -1, -1]).unwrap();
        assert_eq!(downsample_polarity(&m, 2).unwrap().data(), &[0]);
        let m = PolarityMap::new(2, 2, vec![1, 1, -1, 0]).unwrap();
        assert_eq!(downsample_polarity(&m, 2).unwrap().data(), &[1]);
    }

    #[test]
    fn non_divisible_factor() {
        let m = FilamentMask::filled(6, 4, false).unwrap();
        assert!(matches!(downsample_filament(&m, 4), Err(Error::Size(_))));
        assert!(downsample_filament(&m, 0).is_err());
    }

    #[test]
    fn or_pooling_dominates_sublattices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, f) = (2048, 4096, 8);
        let data: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.002)).collect();
        let mask = FilamentMask::new(h, w, data).unwrap();
        let small = downsample_filament(&mask, f).unwrap();
        assert_eq!((small.height(), small.width()), (256, 512));
        for (dr, dc) in [(0, 0), (3, 5), (7, 7)] {
            let sub = (0..256 * 512)
                .filter(|i| mask.get((i / 512) * f + dr, (i % 512) * f + dc))
                .count();
            assert!(small.count() >= sub);
        }
    }

    #[test]
    fn reference_points_text() {
        let spec = GridSpec::new(8, 8).unwrap();
        let set = parse_reference_points("# header\n1 2 1\n\n3 4 -1  # note\n", &spec).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.provenance, Provenance::File);
        let back = parse_reference_points(&format_reference_points(&set), &spec).unwrap();
        assert_eq!(back.points(), set.points());
        assert!(parse_reference_points("1 2 0\n", &spec).is_err());
        assert!(parse_reference_points("9 2 1\n", &spec).is_err());
        assert!(parse_reference_points("1 2\n", &spec).is_err());
    }

    proptest! {
        #[test]
        fn factor_one_is_identity(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pol = PolarityMap::new(h, w, (0..h * w).map(|_| rng.gen_range(-1..=1)).collect()).unwrap();
            prop_assert_eq!(downsample_polarity(&pol, 1).unwrap(), pol.clone());
            let AnyRaster::Polarity(back) = decode(&encode_polarity(&pol), RasterKind::Polarity).unwrap() else { unreachable!() };
            prop_assert_eq!(back, pol);
        }

        #[test]
        fn or_pooling_is_monotone(seed in any::<u64>(), extra in 0usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<bool> = (0..16 * 16).map(|_| rng.gen_bool(0.1)).collect();
            let mut more = base.clone();
            more[extra * 4 % 256] = true;
            let a = downsample_filament(&FilamentMask::new(16, 16, base).unwrap(), 4).unwrap();
            let b = downsample_filament(&FilamentMask::new(16, 16, more).unwrap(), 4).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(!x || *y);
            }
        }
    }
}

//! Trajectory encoding: raw `(t, lat, lon)` records to fixed-width keys.
//!
//! A key is the Geohash of the location followed by the zero-padded index of
//! the time segment the timestamp falls in. Two points map to the same key
//! exactly when they share the Geohash cell and the time segment.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keys::KeyBlock;

pub const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const MAX_GEO_DIGITS: u8 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: i64,
    pub lat: f64,
    pub lon: f64,
}

impl TrajectoryPoint {
    pub fn new(t: i64, lat: f64, lon: f64) -> Result<Self> {
        let p = TrajectoryPoint { t, lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_coordinates(self.lat, self.lon)?;
        if self.t < 0 {
            return Err(Error::invalid(format!("negative timestamp {}", self.t)));
        }
        Ok(())
    }
}

/// Granularity of the contact rule: Geohash digits for space, segment length
/// for time, and the retention period the time labels are counted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Theta {
    pub geo_digits: u8,
    pub period_start: i64,
    pub period_end: i64,
    pub segment_seconds: u64,
    pub time_width: u8,
}

impl Theta {
    pub fn new(
        geo_digits: u8,
        period_start: i64,
        period_end: i64,
        segment_seconds: u64,
        time_width: u8,
    ) -> Result<Self> {
        let theta = Theta {
            geo_digits,
            period_start,
            period_end,
            segment_seconds,
            time_width,
        };
        theta.validate()?;
        Ok(theta)
    }

    /// 14-character keys: 10 Geohash digits plus a 4-digit label over a
    /// 14-day period cut into 10-minute segments.
    pub fn fourteen_day(period_start: i64) -> Self {
        Theta {
            geo_digits: 10,
            period_start,
            period_end: period_start + 14 * 86_400,
            segment_seconds: 600,
            time_width: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_GEO_DIGITS).contains(&self.geo_digits) {
            return Err(Error::invalid(format!(
                "geo_digits must be in 1..=12, got {}",
                self.geo_digits
            )));
        }
        if self.period_end <= self.period_start {
            return Err(Error::invalid("period_end must be after period_start"));
        }
        if self.segment_seconds == 0 {
            return Err(Error::invalid("segment_seconds must be positive"));
        }
        if self.time_width == 0 || self.time_width > 19 {
            return Err(Error::invalid("time_width must be in 1..=19"));
        }
        let capacity = 10u128.pow(self.time_width as u32);
        if self.segment_count() as u128 > capacity {
            return Err(Error::invalid(format!(
                "{} segments do not fit in {} digits",
                self.segment_count(),
                self.time_width
            )));
        }
        Ok(())
    }

    pub fn segment_count(&self) -> u64 {
        let span = (self.period_end - self.period_start) as u64;
        span.div_ceil(self.segment_seconds)
    }

    pub fn key_length(&self) -> usize {
        self.geo_digits as usize + self.time_width as usize
    }

    pub fn contains_time(&self, t: i64) -> bool {
        t >= self.period_start && t < self.period_end
    }

    /// Segment index of `t`, or an out-of-period error.
    pub fn segment_of(&self, t: i64) -> Result<u64> {
        if !self.contains_time(t) {
            return Err(Error::OutOfPeriod {
                t,
                start: self.period_start,
                end: self.period_end,
            });
        }
        Ok((t - self.period_start) as u64 / self.segment_seconds)
    }

    /// Exclusive end time of a segment.
    pub fn segment_end(&self, segment: u64) -> i64 {
        self.period_start + ((segment + 1) * self.segment_seconds) as i64
    }

    /// Decodes the time label of a key produced under this theta.
    pub fn segment_of_key(&self, key: &[u8]) -> Option<u64> {
        if key.len() != self.key_length() {
            return None;
        }
        let label = &key[self.geo_digits as usize..];
        let mut value: u64 = 0;
        for &b in label {
            if !b.is_ascii_digit() {
                return None;
            }
            value = value.checked_mul(10)?.checked_add((b - b'0') as u64)?;
        }
        Some(value)
    }

    /// Length and alphabet check for a key claimed to be encoded under this theta.
    pub fn is_well_formed_key(&self, key: &[u8]) -> bool {
        key.len() == self.key_length()
            && key[..self.geo_digits as usize]
                .iter()
                .all(|b| GEOHASH_ALPHABET.contains(b))
            && key[self.geo_digits as usize..]
                .iter()
                .all(u8::is_ascii_digit)
    }

    pub fn to_bytes(&self) -> [u8; 26] {
        let mut out = [0u8; 26];
        out[0] = self.geo_digits;
        out[1..9].copy_from_slice(&self.period_start.to_le_bytes());
        out[9..17].copy_from_slice(&self.period_end.to_le_bytes());
        out[17..25].copy_from_slice(&self.segment_seconds.to_le_bytes());
        out[25] = self.time_width;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 26 {
            return Err(Error::format("theta encoding must be 26 bytes"));
        }
        let le64 = |r: std::ops::Range<usize>| -> [u8; 8] { bytes[r].try_into().unwrap() };
        Theta::new(
            bytes[0],
            i64::from_le_bytes(le64(1..9)),
            i64::from_le_bytes(le64(9..17)),
            u64::from_le_bytes(le64(17..25)),
            bytes[25],
        )
    }
}

/// One encoded trajectory record.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EncodedKey(String);

impl EncodedKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        self.0.as_bytes()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Debug for EncodedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EncodedKey({})", self.0)
    }
}

impl fmt::Display for EncodedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn check_coordinates(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::invalid(format!("latitude {lat} out of range")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::invalid(format!("longitude {lon} out of range")));
    }
    Ok(())
}

fn geohash_into(lat: f64, lon: f64, digits: u8, out: &mut Vec<u8>) {
    let (mut lat_lo, mut lat_hi) = (-90.0f64, 90.0f64);
    let (mut lon_lo, mut lon_hi) = (-180.0f64, 180.0f64);
    let mut even = true;
    for _ in 0..digits {
        let mut idx = 0usize;
        for _ in 0..5 {
            idx <<= 1;
            if even {
                let mid = (lon_lo + lon_hi) / 2.0;
                if lon >= mid {
                    idx |= 1;
                    lon_lo = mid;
                } else {
                    lon_hi = mid;
                }
            } else {
                let mid = (lat_lo + lat_hi) / 2.0;
                if lat >= mid {
                    idx |= 1;
                    lat_lo = mid;
                } else {
                    lat_hi = mid;
                }
            }
            even = !even;
        }
        out.push(GEOHASH_ALPHABET[idx]);
    }
}

/// Standard Geohash, longitude bit first.
pub fn geohash_encode(lat: f64, lon: f64, digits: u8) -> Result<String> {
    if !(1..=MAX_GEO_DIGITS).contains(&digits) {
        return Err(Error::invalid(format!(
            "geohash digits must be in 1..=12, got {digits}"
        )));
    }
    check_coordinates(lat, lon)?;
    let mut out = Vec::with_capacity(digits as usize);
    geohash_into(lat, lon, digits, &mut out);
    Ok(String::from_utf8(out).expect("alphabet is ASCII"))
}

fn time_label_into(segment: u64, width: u8, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + width as usize, b'0');
    let mut v = segment;
    for slot in out[start..].iter_mut().rev() {
        *slot = b'0' + (v % 10) as u8;
        v /= 10;
    }
}

pub fn periodical_encode(t: i64, theta: &Theta) -> Result<String> {
    let segment = theta.segment_of(t)?;
    let mut out = Vec::with_capacity(theta.time_width as usize);
    time_label_into(segment, theta.time_width, &mut out);
    Ok(String::from_utf8(out).expect("digits are ASCII"))
}

/// Appends the key for `p` to `out`. Lower-level form of [`encode_point`]
/// used on bulk paths to avoid one allocation per record.
pub fn encode_point_into(p: &TrajectoryPoint, theta: &Theta, out: &mut Vec<u8>) -> Result<()> {
    p.validate()?;
    let segment = theta.segment_of(p.t)?;
    geohash_into(p.lat, p.lon, theta.geo_digits, out);
    time_label_into(segment, theta.time_width, out);
    Ok(())
}

pub fn encode_point(p: &TrajectoryPoint, theta: &Theta) -> Result<EncodedKey> {
    let mut out = Vec::with_capacity(theta.key_length());
    encode_point_into(p, theta, &mut out)?;
    Ok(EncodedKey(
        String::from_utf8(out).expect("encoded keys are ASCII"),
    ))
}

/// Counters from a bulk encoding pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    pub encoded: u64,
    pub dropped_out_of_period: u64,
}

/// Encodes every in-period point; out-of-period records are counted and
/// skipped. Invalid coordinates are still an error.
pub fn encode_points<'a, I>(points: I, theta: &Theta) -> Result<(KeyBlock, EncodeStats)>
where
    I: IntoIterator<Item = &'a TrajectoryPoint>,
{
    let mut block = KeyBlock::new(theta.key_length());
    let mut buf = Vec::with_capacity(theta.key_length());
    let mut stats = EncodeStats::default();
    for p in points {
        buf.clear();
        match encode_point_into(p, theta, &mut buf) {
            Ok(()) => {
                block.push(&buf)?;
                stats.encoded += 1;
            }
            Err(Error::OutOfPeriod { .. }) => stats.dropped_out_of_period += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((block, stats))
}

fn parse_line(line: &str, lineno: usize) -> Result<TrajectoryPoint> {
    let parse_err = |message: String| Error::Parse {
        line: lineno,
        message,
    };
    let mut fields = line.split(',');
    let (Some(t), Some(lat), Some(lon), None) =
        (fields.next(), fields.next(), fields.next(), fields.next())
    else {
        return Err(parse_err(format!(
            "expected 3 comma-separated fields, got {}",
            line.split(',').count()
        )));
    };
    let t: i64 = t
        .trim()
        .parse()
        .map_err(|_| parse_err(format!("bad epoch seconds {t:?}")))?;
    let lat: f64 = lat
        .trim()
        .parse()
        .map_err(|_| parse_err(format!("bad latitude {lat:?}")))?;
    let lon: f64 = lon
        .trim()
        .parse()
        .map_err(|_| parse_err(format!("bad longitude {lon:?}")))?;
    if !lat.is_finite() || !lon.is_finite() {
        return Err(parse_err("non-finite coordinate".into()));
    }
    TrajectoryPoint::new(t, lat, lon)
}

/// Reads `epoch_seconds,latitude,longitude` records, one per line.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_trajectory_file<R: BufRead>(reader: R) -> Result<Vec<TrajectoryPoint>> {
    let mut points = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        points.push(parse_line(line, i + 1)?);
    }
    Ok(points)
}

pub fn parse_trajectory_str(text: &str) -> Result<Vec<TrajectoryPoint>> {
    parse_trajectory_file(text.as_bytes())
}

pub fn write_trajectory_csv<W: Write>(mut w: W, points: &[TrajectoryPoint]) -> Result<()> {
    for p in points {
        writeln!(w, "{},{},{}", p.t, p.lat, p.lon)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn theta_600() -> Theta {
        Theta::new(10, 0, 14 * 86_400, 600, 4).unwrap()
    }

    #[test]
    fn geohash_known_vectors() {
        assert_eq!(geohash_encode(57.64911, 10.40744, 11).unwrap(), "u4pruydqqvj");
        assert_eq!(geohash_encode(0.0, 0.0, 1).unwrap(), "s");
        assert!(geohash_encode(0.0, 0.0, 0).is_err());
        assert!(geohash_encode(0.0, 0.0, 13).is_err());
        assert!(geohash_encode(91.0, 0.0, 5).is_err());
        assert!(geohash_encode(0.0, -180.5, 5).is_err());
    }

    #[test]
    fn geohash_extreme_corners() {
        assert_eq!(geohash_encode(90.0, 180.0, 3).unwrap(), "zzz");
        assert_eq!(geohash_encode(-90.0, -180.0, 3).unwrap(), "000");
    }

    #[test]
    fn periodical_labels() {
        let theta = theta_600();
        assert_eq!(periodical_encode(1200, &theta).unwrap(), "0002");
        assert_eq!(periodical_encode(0, &theta).unwrap(), "0000");
        assert_eq!(periodical_encode(1199, &theta).unwrap(), "0001");
        assert!(matches!(
            periodical_encode(theta.period_end, &theta),
            Err(Error::OutOfPeriod { .. })
        ));
        assert!(periodical_encode(-1, &theta).is_err());
    }

    #[test]
    fn theta_validation() {
        assert!(Theta::new(0, 0, 10, 1, 2).is_err());
        assert!(Theta::new(13, 0, 10, 1, 2).is_err());
        assert!(Theta::new(5, 10, 10, 1, 2).is_err());
        assert!(Theta::new(5, 0, 10, 0, 2).is_err());
        // 101 segments need 3 digits
        assert!(Theta::new(5, 0, 101, 1, 2).is_err());
        assert!(Theta::new(5, 0, 100, 1, 2).is_ok());
        assert_eq!(Theta::new(5, 0, 101, 1, 3).unwrap().segment_count(), 101);
        let t = Theta::fourteen_day(1_600_000_000);
        assert_eq!(t.key_length(), 14);
        assert_eq!(t.segment_count(), 2016);
        assert_eq!(Theta::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn encode_point_layout() {
        let theta = theta_600();
        let p = TrajectoryPoint::new(1200, 35.0, 135.0).unwrap();
        let key = encode_point(&p, &theta).unwrap();
        assert_eq!(key.as_str().len(), 14);
        assert_eq!(&key.as_str()[..10], geohash_encode(35.0, 135.0, 10).unwrap());
        assert!(key.as_str().ends_with("0002"));
        assert!(theta.is_well_formed_key(key.as_bytes()));
        assert_eq!(theta.segment_of_key(key.as_bytes()), Some(2));

        let later = TrajectoryPoint::new(1201, 35.0, 135.0).unwrap();
        assert_eq!(encode_point(&later, &theta).unwrap(), key);

        let next = TrajectoryPoint::new(1800, 35.0, 135.0).unwrap();
        let k2 = encode_point(&next, &theta).unwrap();
        assert_eq!(&k2.as_str()[..10], &key.as_str()[..10]);
        assert_eq!(&k2.as_str()[10..], "0003");
    }

    #[test]
    fn encode_points_drops_out_of_period() {
        let theta = Theta::new(6, 100, 200, 10, 2).unwrap();
        let pts = [
            TrajectoryPoint::new(50, 1.0, 1.0).unwrap(),
            TrajectoryPoint::new(150, 1.0, 1.0).unwrap(),
            TrajectoryPoint::new(200, 1.0, 1.0).unwrap(),
        ];
        let (block, stats) = encode_points(&pts, &theta).unwrap();
        assert_eq!(block.len(), 1);
        assert_eq!(stats.dropped_out_of_period, 2);
    }

    #[test]
    fn csv_parsing() {
        let pts = parse_trajectory_str("1600000000,35.0,135.0\n").unwrap();
        assert_eq!(pts, vec![TrajectoryPoint::new(1600000000, 35.0, 135.0).unwrap()]);
        assert!(parse_trajectory_str("").unwrap().is_empty());
        assert!(parse_trajectory_str("\n\n").unwrap().is_empty());
        match parse_trajectory_str("abc,1,2") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_trajectory_str("1,2,3\n1,2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_trajectory_str("1,95.0,3"),
            Err(Error::InvalidInput(_))
        ));
        assert!(parse_trajectory_str("-5,1.0,3").is_err());
    }

    #[test]
    fn csv_write_read_round_trip() {
        let pts = vec![
            TrajectoryPoint::new(1, 35.123456789, 135.987654321).unwrap(),
            TrajectoryPoint::new(2, -0.5, -179.25).unwrap(),
        ];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &pts).unwrap();
        assert_eq!(parse_trajectory_file(&buf[..]).unwrap(), pts);
    }
}

//! Synthetic trajectories.
//!
//! `Walk` people alternate between dwelling at fixed places (a private home,
//! a workplace and a few favourite spots drawn from a shared pool of popular
//! places) and travelling between them in noisy straight-line steps. Dwelling
//! repeats exact coordinates, which is what makes real movement data share
//! key prefixes and suffixes. `Uniform` draws every point independently.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand::rngs::StdRng;
use rand_distr::Normal;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::codec::{encode_point_into, write_trajectory_csv, Theta, TrajectoryPoint};
use crate::error::{Error, Result};
use crate::keys::KeyBlock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MobilityModel {
    Walk,
    Uniform,
}

impl FromStr for MobilityModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "walk" | "random_walk" => Ok(MobilityModel::Walk),
            "uniform" => Ok(MobilityModel::Uniform),
            other => Err(Error::config(format!("unknown mobility model {other:?}"))),
        }
    }
}

impl fmt::Display for MobilityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MobilityModel::Walk => "walk",
            MobilityModel::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat0: f64,
    pub lon0: f64,
    pub lat1: f64,
    pub lon1: f64,
}

impl Default for BoundingBox {
    /// Roughly greater Tokyo.
    fn default() -> Self {
        BoundingBox {
            lat0: 35.50,
            lon0: 139.50,
            lat1: 35.90,
            lon1: 139.95,
        }
    }
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lat0, self.lat1].iter().all(|v| (-90.0..=90.0).contains(v))
            && [self.lon0, self.lon1].iter().all(|v| (-180.0..=180.0).contains(v))
            && self.lat0 < self.lat1
            && self.lon0 < self.lon1;
        if !ok {
            return Err(Error::config(format!("degenerate or out-of-range bounding box {self}")));
        }
        Ok(())
    }

    fn clamp(&self, lat: f64, lon: f64) -> (f64, f64) {
        (lat.clamp(self.lat0, self.lat1), lon.clamp(self.lon0, self.lon1))
    }

    fn sample(&self, rng: &mut StdRng) -> (f64, f64) {
        (rng.gen_range(self.lat0..=self.lat1), rng.gen_range(self.lon0..=self.lon1))
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.lat0, self.lon0, self.lat1, self.lon1)
    }
}

impl FromStr for BoundingBox {
    type Err = Error;

    /// `lat0,lon0,lat1,lon1`
    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::config(format!("bad bounding box {s:?}")))?;
        if v.len() != 4 {
            return Err(Error::config("bounding box needs lat0,lon0,lat1,lon1"));
        }
        let b = BoundingBox {
            lat0: v[0],
            lon0: v[1],
            lat1: v[2],
            lon1: v[3],
        };
        b.validate()?;
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_people: usize,
    pub points_per_person: usize,
    pub bbox: BoundingBox,
    pub model: MobilityModel,
    /// Mean travel distance per sample, degrees.
    pub step_scale_deg: f64,
    pub seed: u64,
    pub start_time: i64,
    pub interval_secs: i64,
    /// Size of the shared pool of popular places.
    pub places: usize,
    /// City centres the places and homes cluster around.
    pub hubs: usize,
    /// Zipf exponent of place popularity.
    pub popularity_exponent: f64,
    /// Favourite places per person, besides home and work.
    pub favourites: usize,
    /// Homes are drawn from this many shared residential buildings; 0 gives
    /// everyone a private home.
    pub residences: usize,
    /// Chance of staying put at each daytime sample.
    pub stay_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_people: 100,
            points_per_person: 1440,
            bbox: BoundingBox::default(),
            model: MobilityModel::Walk,
            step_scale_deg: 0.05,
            seed: 1,
            start_time: 1_600_000_000,
            interval_secs: 840,
            places: 2000,
            hubs: 6,
            popularity_exponent: 1.0,
            favourites: 3,
            residences: 0,
            stay_prob: 0.95,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if self.interval_secs <= 0 {
            return Err(Error::config("interval_secs must be positive"));
        }
        if !(self.step_scale_deg > 0.0 && self.step_scale_deg.is_finite()) {
            return Err(Error::config("step_scale_deg must be positive"));
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            return Err(Error::config("stay_prob must be in [0, 1)"));
        }
        if self.model == MobilityModel::Walk && (self.places == 0 || self.hubs == 0) {
            return Err(Error::config("walk model needs at least one place and one hub"));
        }
        Ok(())
    }

    /// The theta used for generated data: 14-character keys over a period
    /// that starts at `start_time` and covers every sample.
    pub fn theta(&self) -> Theta {
        let mut t = Theta::fourteen_day(self.start_time);
        let span = self.interval_secs * self.points_per_person as i64;
        if span > t.period_end - t.period_start {
            t.period_end = t.period_start + span;
        }
        t
    }
}

/// Per-person streams are independent, so person `i` is the same no matter
/// how many people are generated.
pub struct Generator {
    config: GeneratorConfig,
    places: Vec<(f64, f64)>,
    residences: Vec<(f64, f64)>,
    hubs: Vec<(f64, f64)>,
    popularity: Option<WeightedIndex<f64>>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(splitmix(config.seed));
        let bbox = config.bbox;
        let mut hubs = Vec::new();
        let mut places = Vec::new();
        let mut residences = Vec::new();
        let mut popularity = None;
        if config.model == MobilityModel::Walk {
            hubs = (0..config.hubs).map(|_| bbox.sample(&mut rng)).collect();
            let spread = (bbox.lat1 - bbox.lat0).min(bbox.lon1 - bbox.lon0) * 0.12;
            let noise = Normal::new(0.0, spread).unwrap();
            places = (0..config.places)
                .map(|_| {
                    let (hl, ho) = hubs[rng.gen_range(0..hubs.len())];
                    bbox.clamp(hl + noise.sample(&mut rng), ho + noise.sample(&mut rng))
                })
                .collect();
            residences = (0..config.residences)
                .map(|_| {
                    let (hl, ho) = hubs[rng.gen_range(0..hubs.len())];
                    bbox.clamp(hl + noise.sample(&mut rng), ho + noise.sample(&mut rng))
                })
                .collect();
            let weights: Vec<f64> = (1..=config.places)
                .map(|r| 1.0 / (r as f64).powf(config.popularity_exponent))
                .collect();
            popularity = Some(WeightedIndex::new(weights).map_err(|e| Error::config(e.to_string()))?);
        }
        Ok(Generator {
            config,
            places,
            residences,
            hubs,
            popularity,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn person(&self, index: u64) -> Vec<TrajectoryPoint> {
        let mut rng = StdRng::seed_from_u64(splitmix(self.config.seed ^ splitmix(index.wrapping_add(1))));
        match self.config.model {
            MobilityModel::Uniform => self.uniform_person(&mut rng),
            MobilityModel::Walk => self.walk_person(&mut rng),
        }
    }

    fn time_of(&self, i: usize) -> i64 {
        self.config.start_time + i as i64 * self.config.interval_secs
    }

    fn uniform_person(&self, rng: &mut StdRng) -> Vec<TrajectoryPoint> {
        let c = &self.config;
        let span = c.interval_secs * c.points_per_person as i64;
        let mut pts: Vec<TrajectoryPoint> = (0..c.points_per_person)
            .map(|_| {
                let (lat, lon) = c.bbox.sample(rng);
                TrajectoryPoint {
                    t: c.start_time + rng.gen_range(0..span.max(1)),
                    lat,
                    lon,
                }
            })
            .collect();
        pts.sort_by_key(|p| p.t);
        pts
    }

    fn popular_place(&self, rng: &mut StdRng) -> (f64, f64) {
        self.places[self.popularity.as_ref().unwrap().sample(rng)]
    }

    fn walk_person(&self, rng: &mut StdRng) -> Vec<TrajectoryPoint> {
        let c = &self.config;
        let bbox = c.bbox;
        let spread = (bbox.lat1 - bbox.lat0).min(bbox.lon1 - bbox.lon0) * 0.12;
        let noise = Normal::new(0.0, spread).unwrap();
        let home = if self.residences.is_empty() {
            let (hl, ho) = self.hubs[rng.gen_range(0..self.hubs.len())];
            bbox.clamp(hl + noise.sample(rng), ho + noise.sample(rng))
        } else {
            self.residences[rng.gen_range(0..self.residences.len())]
        };
        let work = self.popular_place(rng);
        let favourites: Vec<(f64, f64)> = (0..c.favourites).map(|_| self.popular_place(rng)).collect();
        let jitter = Normal::new(0.0, c.step_scale_deg * 0.15).unwrap();

        let mut pos = home;
        let mut dest: Option<(f64, f64)> = None;
        let mut pts = Vec::with_capacity(c.points_per_person);
        for i in 0..c.points_per_person {
            let t = self.time_of(i);
            // local hour, UTC+9
            let hour = (t + 9 * 3600).rem_euclid(86_400) / 3600;
            let night = !(7..22).contains(&hour);
            if dest.is_none() {
                let leave = if night { pos != home && rng.gen_bool(0.5) } else { !rng.gen_bool(c.stay_prob) };
                if leave {
                    let target = if night {
                        home
                    } else {
                        let r: f64 = rng.gen();
                        if r < 0.2 || favourites.is_empty() {
                            home
                        } else if r < 0.55 {
                            work
                        } else {
                            favourites[rng.gen_range(0..favourites.len())]
                        }
                    };
                    if target != pos {
                        dest = Some(target);
                    }
                }
            }
            if let Some(d) = dest {
                let (dl, dn) = (d.0 - pos.0, d.1 - pos.1);
                let dist = (dl * dl + dn * dn).sqrt();
                let step = c.step_scale_deg * rng.gen_range(0.5..1.5);
                if dist <= step {
                    pos = d;
                    dest = None;
                } else {
                    let f = step / dist;
                    pos = bbox.clamp(
                        pos.0 + dl * f + jitter.sample(rng),
                        pos.1 + dn * f + jitter.sample(rng),
                    );
                }
            }
            pts.push(TrajectoryPoint {
                t,
                lat: pos.0,
                lon: pos.1,
            });
        }
        pts
    }

    pub fn generate(&self) -> Vec<Vec<TrajectoryPoint>> {
        (0..self.config.num_people as u64).map(|i| self.person(i)).collect()
    }

    /// Encodes people in order until exactly `target` distinct keys exist,
    /// ignoring `num_people`. Returns them sorted.
    pub fn unique_keys(&self, theta: &Theta, target: usize) -> Result<KeyBlock> {
        let width = theta.key_length();
        if width > 16 {
            return Err(Error::config("unique_keys supports keys of at most 16 bytes"));
        }
        let mut seen: FxHashSet<u128> = FxHashSet::default();
        seen.reserve(target);
        let mut block = KeyBlock::with_capacity(width, target);
        let mut buf = Vec::with_capacity(width);
        let mut index = 0u64;
        let mut idle = 0;
        while block.len() < target {
            let before = block.len();
            for p in self.person(index) {
                buf.clear();
                if encode_point_into(&p, theta, &mut buf).is_err() {
                    continue;
                }
                let mut packed = [0u8; 16];
                packed[..width].copy_from_slice(&buf);
                if seen.insert(u128::from_le_bytes(packed)) {
                    block.push(&buf)?;
                    if block.len() == target {
                        break;
                    }
                }
            }
            index += 1;
            idle = if block.len() == before { idle + 1 } else { 0 };
            if idle > 1000 {
                return Err(Error::config(format!(
                    "generator stopped producing new keys after {} of {target}",
                    block.len()
                )));
            }
        }
        block.sort_dedup();
        Ok(block)
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<Vec<Vec<TrajectoryPoint>>> {
    Ok(Generator::new(config.clone())?.generate())
}

/// Writes one `person-NNNNNN.csv` per person into `dir`.
pub fn write_people(config: &GeneratorConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let gen = Generator::new(config.clone())?;
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(config.num_people);
    for i in 0..config.num_people {
        let path = dir.join(format!("person-{i:06}.csv"));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        write_trajectory_csv(&mut w, &gen.person(i as u64))?;
        std::io::Write::flush(&mut w)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        for model in [MobilityModel::Walk, MobilityModel::Uniform] {
            let cfg = GeneratorConfig {
                num_people: 3,
                points_per_person: 50,
                model,
                ..Default::default()
            };
            let a = generate(&cfg).unwrap();
            assert_eq!(a, generate(&cfg).unwrap());
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|p| p.len() == 50));
            assert!(a.iter().flatten().all(|p| p.validate().is_ok()));
            assert!(a[0].windows(2).all(|w| w[0].t <= w[1].t));
            let other = generate(&GeneratorConfig { seed: 2, ..cfg }).unwrap();
            assert_ne!(a, other);
        }
    }

    #[test]
    fn bad_configs() {
        assert!("35,139,35,140".parse::<BoundingBox>().is_err());
        assert!("35,139,36".parse::<BoundingBox>().is_err());
        assert!("35,139,36,140".parse::<BoundingBox>().is_ok());
        let cfg = GeneratorConfig {
            stay_prob: 1.0,
            ..Default::default()
        };
        assert!(Generator::new(cfg).is_err());
    }

    #[test]
    fn unique_keys_hits_target() {
        let cfg = GeneratorConfig {
            points_per_person: 200,
            ..Default::default()
        };
        let g = Generator::new(cfg.clone()).unwrap();
        let keys = g.unique_keys(&cfg.theta(), 1234).unwrap();
        assert_eq!(keys.len(), 1234);
        assert!(keys.is_strictly_sorted());
    }
}

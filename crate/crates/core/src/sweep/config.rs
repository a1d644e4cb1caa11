//! Protocol configurations, config/grid files and setting precedence.
//!
//! Config and grid files share one flat syntax: `key = value` per line,
//! `#` comments, keys spelled like the CLI flags without the leading dashes.
//! Grid files accept comma-separated value lists.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SweepError;
use crate::geometry::{GeometryKind, RansacParams};
use crate::imaging::NormalizationKind;
use crate::matching::{MatcherSpec, DEFAULT_KEYPOINT_BUDGET};

pub const DEFAULT_MAX_DIMENSION: usize = 2048;
pub const DEFAULT_TILE_SIZE: usize = 768;
pub const DEFAULT_TILE_OVERLAP: usize = 256;
pub const DEFAULT_RANSAC_THRESHOLD: f64 = 10.0;
pub const DEFAULT_MIN_INLIERS: usize = 6;

/// One cell of a protocol sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub normalization: NormalizationKind,
    pub max_dimension: usize,
    pub tile_size: usize,
    pub tile_overlap: usize,
    pub geometry: GeometryKind,
    pub ransac_threshold: f64,
    pub min_inliers: usize,
    pub keypoint_budget: usize,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            normalization: NormalizationKind::Identity,
            max_dimension: DEFAULT_MAX_DIMENSION,
            tile_size: DEFAULT_TILE_SIZE,
            tile_overlap: DEFAULT_TILE_OVERLAP,
            geometry: GeometryKind::Affine,
            ransac_threshold: DEFAULT_RANSAC_THRESHOLD,
            min_inliers: DEFAULT_MIN_INLIERS,
            keypoint_budget: DEFAULT_KEYPOINT_BUDGET,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    /// Canonical key used in every report.
    pub fn key(&self) -> String {
        format!(
            "norm={}|maxdim={}|tile={}|ov={}|geom={}|thr={}|mininl={}|kp={}|seed={}",
            self.normalization,
            self.max_dimension,
            self.tile_size,
            self.tile_overlap,
            self.geometry,
            self.ransac_threshold,
            self.min_inliers,
            self.keypoint_budget,
            self.seed
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_dimension == 0 {
            return Err("max-dimension must be at least 1".into());
        }
        if self.tile_size == 0 {
            return Err("tile-size must be at least 1".into());
        }
        if self.tile_overlap >= self.tile_size {
            return Err(format!(
                "tile-overlap {} must be smaller than tile-size {}",
                self.tile_overlap, self.tile_size
            ));
        }
        if self.keypoint_budget == 0 {
            return Err("keypoint-budget must be at least 1".into());
        }
        self.ransac_params(self.seed)
            .validate(self.geometry)
            .map_err(|e| e.to_string())
    }

    pub fn ransac_params(&self, seed: u64) -> RansacParams {
        RansacParams {
            reproj_threshold: self.ransac_threshold,
            min_inliers: self.min_inliers,
            seed,
            ..RansacParams::default()
        }
    }
}

/// Optional value for every setting; one layer of the precedence stack.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub normalization: Option<NormalizationKind>,
    pub max_dimension: Option<usize>,
    pub tile_size: Option<usize>,
    pub tile_overlap: Option<usize>,
    pub geometry: Option<GeometryKind>,
    pub ransac_threshold: Option<f64>,
    pub min_inliers: Option<usize>,
    pub keypoint_budget: Option<usize>,
    pub seed: Option<u64>,
    pub matcher: Option<MatcherSpec>,
    pub manifest: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub dump_tiles: Option<bool>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub protocol: ProtocolConfig,
    pub matcher: MatcherSpec,
    pub manifest: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub dump_tiles: bool,
}

impl Overrides {
    /// `self` wins over `lower` wherever it is set.
    pub fn over(&self, lower: &Overrides) -> Overrides {
        Overrides {
            normalization: self.normalization.or(lower.normalization),
            max_dimension: self.max_dimension.or(lower.max_dimension),
            tile_size: self.tile_size.or(lower.tile_size),
            tile_overlap: self.tile_overlap.or(lower.tile_overlap),
            geometry: self.geometry.or(lower.geometry),
            ransac_threshold: self.ransac_threshold.or(lower.ransac_threshold),
            min_inliers: self.min_inliers.or(lower.min_inliers),
            keypoint_budget: self.keypoint_budget.or(lower.keypoint_budget),
            seed: self.seed.or(lower.seed),
            matcher: self.matcher.clone().or_else(|| lower.matcher.clone()),
            manifest: self.manifest.clone().or_else(|| lower.manifest.clone()),
            grid: self.grid.clone().or_else(|| lower.grid.clone()),
            output_dir: self.output_dir.clone().or_else(|| lower.output_dir.clone()),
            jobs: self.jobs.or(lower.jobs),
            dump_tiles: self.dump_tiles.or(lower.dump_tiles),
        }
    }

    /// Fills unset values from `defaults`.
    pub fn resolve(&self, defaults: &ProtocolConfig) -> Settings {
        let d = defaults;
        let keypoint_budget = self.keypoint_budget.unwrap_or(d.keypoint_budget);
        Settings {
            protocol: ProtocolConfig {
                normalization: self.normalization.unwrap_or(d.normalization),
                max_dimension: self.max_dimension.unwrap_or(d.max_dimension),
                tile_size: self.tile_size.unwrap_or(d.tile_size),
                tile_overlap: self.tile_overlap.unwrap_or(d.tile_overlap),
                geometry: self.geometry.unwrap_or(d.geometry),
                ransac_threshold: self.ransac_threshold.unwrap_or(d.ransac_threshold),
                min_inliers: self.min_inliers.unwrap_or(d.min_inliers),
                keypoint_budget,
                seed: self.seed.unwrap_or(d.seed),
            },
            matcher: self
                .matcher
                .clone()
                .unwrap_or_default()
                .with_budget(keypoint_budget),
            manifest: self.manifest.clone(),
            grid: self.grid.clone(),
            output_dir: self.output_dir.clone(),
            jobs: self.jobs,
            dump_tiles: self.dump_tiles.unwrap_or(false),
        }
    }

    /// Parses a config file. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Overrides, SweepError> {
        let mut o = Overrides::default();
        for (line_no, key, value) in key_values(text)? {
            let at = |msg: String| SweepError::Parse {
                line: line_no,
                message: format!("{key}: {msg}"),
            };
            let path = |v: &str| base.join(v);
            match key.as_str() {
                "normalization" => o.normalization = Some(parse_value(&value).map_err(at)?),
                "max-dimension" => o.max_dimension = Some(parse_value(&value).map_err(at)?),
                "tile-size" => o.tile_size = Some(parse_value(&value).map_err(at)?),
                "tile-overlap" => o.tile_overlap = Some(parse_value(&value).map_err(at)?),
                "geometry" => o.geometry = Some(parse_value(&value).map_err(at)?),
                "ransac-threshold" => o.ransac_threshold = Some(parse_value(&value).map_err(at)?),
                "min-inliers" => o.min_inliers = Some(parse_value(&value).map_err(at)?),
                "keypoint-budget" => o.keypoint_budget = Some(parse_value(&value).map_err(at)?),
                "seed" => o.seed = Some(parse_value(&value).map_err(at)?),
                "matcher" => o.matcher = Some(parse_value(&value).map_err(at)?),
                "manifest" => o.manifest = Some(path(&value)),
                "grid" => o.grid = Some(path(&value)),
                "output-dir" => o.output_dir = Some(path(&value)),
                "jobs" => o.jobs = Some(parse_value(&value).map_err(at)?),
                "dump-tiles" => o.dump_tiles = Some(parse_bool(&value).map_err(at)?),
                _ => {
                    return Err(SweepError::Parse {
                        line: line_no,
                        message: format!("unknown key '{key}'"),
                    })
                }
            }
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Overrides, SweepError> {
        let text = std::fs::read_to_string(path).map_err(|e| SweepError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Overrides::parse(&text, base).map_err(|e| e.in_file(path))
    }
}

fn parse_value<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse::<T>()
        .map_err(|e| format!("invalid value '{v}': {e}"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("invalid boolean '{v}'")),
    }
}

/// `(line number, normalized key, value)` for every non-blank line.
pub(crate) fn key_values(text: &str) -> Result<Vec<(usize, String, String)>, SweepError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| SweepError::Parse {
            line: i + 1,
            message: format!("expected 'key = value', found '{line}'"),
        })?;
        let key = k.trim().to_ascii_lowercase().replace('_', "-");
        out.push((i + 1, key, v.trim().to_string()));
    }
    Ok(out)
}

/// Value lists per [`ProtocolConfig`] field plus the matchers to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub matchers: Vec<MatcherSpec>,
    pub normalization: Vec<NormalizationKind>,
    pub geometry: Vec<GeometryKind>,
    pub max_dimension: Vec<usize>,
    pub tile_size: Vec<usize>,
    pub tile_overlap: Vec<usize>,
    pub ransac_threshold: Vec<f64>,
    pub min_inliers: Vec<usize>,
    pub keypoint_budget: Vec<usize>,
    pub seed: Vec<u64>,
}

impl SweepGrid {
    /// Single-cell grid.
    pub fn single(config: &ProtocolConfig, matcher: &MatcherSpec) -> Self {
        Self {
            matchers: vec![matcher.clone()],
            normalization: vec![config.normalization],
            geometry: vec![config.geometry],
            max_dimension: vec![config.max_dimension],
            tile_size: vec![config.tile_size],
            tile_overlap: vec![config.tile_overlap],
            ransac_threshold: vec![config.ransac_threshold],
            min_inliers: vec![config.min_inliers],
            keypoint_budget: vec![config.keypoint_budget],
            seed: vec![config.seed],
        }
    }

    /// Axis lengths in expansion order, outermost first.
    pub fn axis_lengths(&self) -> [(&'static str, usize); 10] {
        [
            ("matcher", self.matchers.len()),
            ("normalization", self.normalization.len()),
            ("geometry", self.geometry.len()),
            ("max-dimension", self.max_dimension.len()),
            ("tile-size", self.tile_size.len()),
            ("tile-overlap", self.tile_overlap.len()),
            ("ransac-threshold", self.ransac_threshold.len()),
            ("min-inliers", self.min_inliers.len()),
            ("keypoint-budget", self.keypoint_budget.len()),
            ("seed", self.seed.len()),
        ]
    }

    pub fn size(&self) -> usize {
        self.axis_lengths().iter().map(|(_, n)| n).product()
    }

    /// Parses a grid file; keys absent from the file take `base`'s value.
    pub fn parse(text: &str, base: &ProtocolConfig, matcher: &MatcherSpec) -> Result<SweepGrid, SweepError> {
        let mut grid = SweepGrid::single(base, matcher);
        for (line_no, key, value) in key_values(text)? {
            let at = |message: String| SweepError::Parse {
                line: line_no,
                message: format!("{key}: {message}"),
            };
            match key.as_str() {
                "matcher" | "matchers" => grid.matchers = parse_list(&value).map_err(at)?,
                "normalization" => grid.normalization = parse_list(&value).map_err(at)?,
                "geometry" => grid.geometry = parse_list(&value).map_err(at)?,
                "max-dimension" => grid.max_dimension = parse_list(&value).map_err(at)?,
                "tile-size" => grid.tile_size = parse_list(&value).map_err(at)?,
                "tile-overlap" => grid.tile_overlap = parse_list(&value).map_err(at)?,
                "ransac-threshold" => grid.ransac_threshold = parse_list(&value).map_err(at)?,
                "min-inliers" => grid.min_inliers = parse_list(&value).map_err(at)?,
                "keypoint-budget" => grid.keypoint_budget = parse_list(&value).map_err(at)?,
                "seed" => grid.seed = parse_list(&value).map_err(at)?,
                _ => {
                    return Err(SweepError::Parse {
                        line: line_no,
                        message: format!("unknown grid axis '{key}'"),
                    })
                }
            }
        }
        Ok(grid)
    }

    pub fn load(path: &Path, base: &ProtocolConfig, matcher: &MatcherSpec) -> Result<SweepGrid, SweepError> {
        let text = std::fs::read_to_string(path).map_err(|e| SweepError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        SweepGrid::parse(&text, base, matcher).map_err(|e| e.in_file(path))
    }
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(parse_value)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_and_key() {
        let c = ProtocolConfig::default();
        assert_eq!(
            c.key(),
            "norm=identity|maxdim=2048|tile=768|ov=256|geom=affine|thr=10|mininl=6|kp=4096|seed=0"
        );
        assert!(c.validate().is_ok());
        let bad = ProtocolConfig { tile_overlap: 768, ..c.clone() };
        assert!(bad.validate().is_err());
        let bad = ProtocolConfig { min_inliers: 3, geometry: GeometryKind::Homography, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_file_parsing() {
        let text = "# protocol\ngeometry = homography\nransac_threshold = 3.5\nmanifest = pairs.txt\ndump-tiles = yes\n";
        let o = Overrides::parse(text, Path::new("/data")).unwrap();
        assert_eq!(o.geometry, Some(GeometryKind::Homography));
        assert_eq!(o.ransac_threshold, Some(3.5));
        assert_eq!(o.manifest, Some(PathBuf::from("/data/pairs.txt")));
        assert_eq!(o.dump_tiles, Some(true));
        let err = Overrides::parse("\nfoo = 1\n", Path::new(".")).unwrap_err();
        assert!(matches!(err, SweepError::Parse { line: 2, .. }), "{err}");
        assert!(Overrides::parse("geometry = pinhole", Path::new(".")).is_err());
        assert!(Overrides::parse("tile-size 5", Path::new(".")).is_err());
    }

    #[test]
    fn grid_file_parsing() {
        let text = "geometry = affine, homography\nmin-inliers = 4,8\nmatchers = builtin, external:run-matcher --gpu\n";
        let g = SweepGrid::parse(text, &ProtocolConfig::default(), &MatcherSpec::builtin()).unwrap();
        assert_eq!(g.geometry.len(), 2);
        assert_eq!(g.matchers[1].external_command.as_deref(), Some("run-matcher --gpu"));
        assert_eq!(g.tile_size, vec![DEFAULT_TILE_SIZE]);
        assert_eq!(g.size(), 8);
        assert!(SweepGrid::parse("colour = red", &ProtocolConfig::default(), &MatcherSpec::builtin()).is_err());
    }

    fn arb_layer() -> impl Strategy<Value = Overrides> {
        (
            proptest::option::of(prop_oneof![Just(NormalizationKind::Identity), Just(NormalizationKind::Clahe)]),
            proptest::option::of(1usize..5000),
            proptest::option::of(1usize..2000),
            proptest::option::of(prop_oneof![Just(GeometryKind::Affine), Just(GeometryKind::Homography)]),
            proptest::option::of(0.5f64..50.0),
            proptest::option::of(4usize..20),
            proptest::option::of(1usize..9000),
            proptest::option::of(any::<u64>()),
        )
            .prop_map(|(n, md, ts, g, thr, mi, kp, seed)| Overrides {
                normalization: n,
                max_dimension: md,
                tile_size: ts,
                geometry: g,
                ransac_threshold: thr,
                min_inliers: mi,
                keypoint_budget: kp,
                seed,
                ..Overrides::default()
            })
    }

    proptest! {
        #[test]
        fn flag_beats_file_beats_default(file in arb_layer(), flags in arb_layer()) {
            let d = ProtocolConfig::default();
            let s = flags.over(&file).resolve(&d).protocol;
            prop_assert_eq!(s.normalization, flags.normalization.or(file.normalization).unwrap_or(d.normalization));
            prop_assert_eq!(s.max_dimension, flags.max_dimension.or(file.max_dimension).unwrap_or(d.max_dimension));
            prop_assert_eq!(s.tile_size, flags.tile_size.or(file.tile_size).unwrap_or(d.tile_size));
            prop_assert_eq!(s.geometry, flags.geometry.or(file.geometry).unwrap_or(d.geometry));
            prop_assert_eq!(s.ransac_threshold, flags.ransac_threshold.or(file.ransac_threshold).unwrap_or(d.ransac_threshold));
            prop_assert_eq!(s.min_inliers, flags.min_inliers.or(file.min_inliers).unwrap_or(d.min_inliers));
            prop_assert_eq!(s.keypoint_budget, flags.keypoint_budget.or(file.keypoint_budget).unwrap_or(d.keypoint_budget));
            prop_assert_eq!(s.seed, flags.seed.or(file.seed).unwrap_or(d.seed));
        }
    }
}

//! Pipeline configuration: one TOML file plus `--set key=value` overrides.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, validation, Error, Result};
use crate::geojson::read_feature_collection;
use crate::layers::{
    attach_blocks, districts_from_features, land_use_from_features, points_from_features,
    polygons_from_features, sites_from_features, ActivityLayer, BuildingHeightTable, District,
};
use crate::poi::{poi_layer_from_features, PoiLayer};
use crate::proxies::{ProxyLayers, PROXY_NAMES, VITALITY};
use crate::regress::RegressorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityInputs {
    pub name: String,
    pub raster: PathBuf,
    pub districts: PathBuf,
    pub blocks: PathBuf,
    pub land_use: PathBuf,
    pub parks: PathBuf,
    pub intersections: PathBuf,
    pub radio_sites: PathBuf,
    #[serde(default)]
    pub water: Option<PathBuf>,
    pub height_counts: PathBuf,
    pub height_floors: PathBuf,
    #[serde(default)]
    pub pois: Option<PathBuf>,
    /// City outline; the districts' bounding rectangle when absent.
    #[serde(default)]
    pub boundary: Option<PathBuf>,
}

impl CityInputs {
    pub fn paths(&self) -> Vec<(&'static str, &Path)> {
        let mut v = vec![
            ("raster", self.raster.as_path()),
            ("districts", self.districts.as_path()),
            ("blocks", self.blocks.as_path()),
            ("land_use", self.land_use.as_path()),
            ("parks", self.parks.as_path()),
            ("intersections", self.intersections.as_path()),
            ("radio_sites", self.radio_sites.as_path()),
            ("height_counts", self.height_counts.as_path()),
            ("height_floors", self.height_floors.as_path()),
        ];
        if let Some(w) = &self.water {
            v.push(("water", w));
        }
        if let Some(p) = &self.pois {
            v.push(("pois", p));
        }
        if let Some(p) = &self.boundary {
            v.push(("boundary", p));
        }
        v
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.raster,
            &mut self.districts,
            &mut self.blocks,
            &mut self.land_use,
            &mut self.parks,
            &mut self.intersections,
            &mut self.radio_sites,
            &mut self.height_counts,
            &mut self.height_floors,
        ] {
            fix(p);
        }
        for p in [&mut self.water, &mut self.pois, &mut self.boundary]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    /// Every input file of the city, for hashing.
    pub fn files(&self) -> Vec<PathBuf> {
        self.paths()
            .into_iter()
            .map(|(_, p)| p.to_path_buf())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Precomputed embeddings; baseline features are used when absent.
    pub embeddings: Option<PathBuf>,
    pub n_comp: usize,
    /// Fit PCA on unassigned imagelets too.
    pub pca_on_all_imagelets: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            embeddings: None,
            n_comp: 16,
            pca_on_all_imagelets: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Variables modeled on the log scale.
    pub log_columns: Vec<String>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            log_columns: vec![
                VITALITY.to_string(),
                "land_use_mix".to_string(),
                "building_height".to_string(),
                "small_parks".to_string(),
            ],
        }
    }
}

impl PreprocessConfig {
    pub fn is_log(&self, name: &str) -> bool {
        self.log_columns.iter().any(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub stage1_family: RegressorSpec,
    pub stage2_family: RegressorSpec,
    pub train_on_true_proxies: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            stage1_family: RegressorSpec::elasticnet(),
            stage2_family: RegressorSpec::elasticnet(),
            train_on_true_proxies: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub repeats: usize,
    /// Defaults to a substream of the pipeline seed.
    pub seed: Option<u64>,
    pub loco: bool,
    pub two_stage: TwoStageConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 5,
            repeats: 100,
            seed: None,
            loco: true,
            two_stage: TwoStageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoiConfig {
    /// Ground-truth variables to split into tertile classes. `small_blocks`
    /// is negated block size.
    pub variables: Vec<String>,
    pub folds: usize,
}

impl Default for PoiConfig {
    fn default() -> Self {
        PoiConfig {
            variables: vec![
                VITALITY.to_string(),
                "small_blocks".to_string(),
                "small_parks".to_string(),
            ],
            folds: 5,
        }
    }
}

pub const POI_VARIABLES: [&str; 8] = [
    VITALITY,
    "small_blocks",
    "land_use_mix",
    "building_height",
    "small_parks",
    "block_size",
    "intersection_density",
    "anisotropicity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub emit_pngs: bool,
    pub cities: Vec<CityInputs>,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default = "RegressorSpec::svr")]
    pub regressor: RegressorSpec,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub poi: PoiConfig,
}

/// Applies a `key.path=value` override; the value is parsed as TOML and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| validation!("override `{assignment}` is not key=value"))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(validation!("override key `{key}` is malformed"));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| validation!("override `{key}`: `{p}` is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses, applies overrides, resolves relative paths against `base`,
    /// then validates.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| format_err!("config: {e}"))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| format_err!("config: {e}"))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::parse(&text, base, overrides)
    }

    fn resolve(&mut self, base: &Path) {
        if self.out_dir.is_relative() {
            self.out_dir = base.join(&self.out_dir);
        }
        for c in &mut self.cities {
            c.resolve(base);
        }
        if let Some(e) = &mut self.features.embeddings {
            if e.is_relative() {
                *e = base.join(&*e);
            }
        }
    }

    /// Lists every problem at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.cities.is_empty() {
            errs.push("at least one [[cities]] entry is required".to_string());
        }
        let mut names = BTreeSet::new();
        for c in &self.cities {
            if c.name.is_empty() || c.name.contains(['/', '\\', ',']) {
                errs.push(format!(
                    "city name `{}` must be non-empty without `/`, `\\` or `,`",
                    c.name
                ));
            }
            if !names.insert(&c.name) {
                errs.push(format!("duplicate city `{}`", c.name));
            }
            for (field, p) in c.paths() {
                if !p.is_file() {
                    errs.push(format!(
                        "city `{}`: {field} file {} does not exist",
                        c.name,
                        p.display()
                    ));
                }
            }
        }
        if let Some(e) = &self.features.embeddings {
            if !e.is_file() {
                errs.push(format!("embeddings file {} does not exist", e.display()));
            }
        }
        if !(1..=64).contains(&self.features.n_comp) {
            errs.push(format!(
                "features.n_comp = {} must lie in 1..=64",
                self.features.n_comp
            ));
        }
        for c in &self.preprocess.log_columns {
            if c != VITALITY
                && !PROXY_NAMES.contains(&c.as_str())
                && !c.starts_with("mu_")
                && !c.starts_with("sigma_")
                && c != "p"
            {
                errs.push(format!("preprocess.log_columns: unknown column `{c}`"));
            }
        }
        for (what, spec) in [
            ("regressor", &self.regressor),
            (
                "eval.two_stage.stage1_family",
                &self.eval.two_stage.stage1_family,
            ),
            (
                "eval.two_stage.stage2_family",
                &self.eval.two_stage.stage2_family,
            ),
        ] {
            if let Err(e) = spec.validate() {
                errs.push(format!("{what}: {e}"));
            }
        }
        if self.eval.k < 2 {
            errs.push("eval.k must be at least 2".to_string());
        }
        if self.eval.repeats == 0 {
            errs.push("eval.repeats must be positive".to_string());
        }
        for v in &self.poi.variables {
            if !POI_VARIABLES.contains(&v.as_str()) {
                errs.push(format!("poi.variables: unknown variable `{v}`"));
            }
        }
        if self.poi.folds < 2 {
            errs.push("poi.folds must be at least 2".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs.join("\n")))
        }
    }

    /// Seed for a named stage: the first 8 bytes of SHA-256("{seed}:{stage}").
    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or_else(|| self.stage_seed("eval"))
    }
}

pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// The vector layers of one city, loaded and linked.
#[derive(Debug, Clone)]
pub struct CityLayers {
    pub districts: Vec<District>,
    pub proxies: ProxyLayers,
    pub pois: Option<PoiLayer>,
}

pub fn load_city_layers(c: &CityInputs) -> Result<CityLayers> {
    let mut districts = districts_from_features(&read_feature_collection(&c.districts)?)?;
    if let Some(d) = districts.iter().find(|d| d.city != c.name) {
        return Err(validation!(
            "district {} belongs to city `{}`, expected `{}`",
            d.district_id,
            d.city,
            c.name
        ));
    }
    attach_blocks(&mut districts, &read_feature_collection(&c.blocks)?)?;
    let water = match &c.water {
        Some(p) => polygons_from_features(&read_feature_collection(p)?)?,
        None => Vec::new(),
    };
    let proxies = ProxyLayers {
        land_use: land_use_from_features(&read_feature_collection(&c.land_use)?)?,
        parks: polygons_from_features(&read_feature_collection(&c.parks)?)?,
        intersections: points_from_features(&read_feature_collection(&c.intersections)?)?,
        heights: BuildingHeightTable::load(&c.height_counts, &c.height_floors)?,
        activity: ActivityLayer {
            sites: sites_from_features(&read_feature_collection(&c.radio_sites)?)?,
            water,
        },
    };
    let pois = match &c.pois {
        Some(p) => Some(poi_layer_from_features(&read_feature_collection(p)?)?),
        None => None,
    };
    Ok(CityLayers {
        districts,
        proxies,
        pois,
    })
}

//! Stage orchestration with file-artifact handoff.
//!
//! Each stage reads its predecessors' files from the output directory and
//! writes its own under `<out_dir>/<stage>/`. `manifest.json` records the
//! hashes of every stage's settings, inputs and outputs; a stage whose
//! record still matches is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{load_city_layers, stage_seed, CityInputs, PipelineConfig};
use crate::error::{format_err, validation, Error, Result};
use crate::eval::{
    leave_one_city_out, repeated_kfold, residual_features, residuals_to_csv, two_stage_vitality,
    Dataset, EvalReport, FoldPlan, ProxyTargets, TwoStageSpec,
};
use crate::features::{
    aggregate_district, baseline_features, build_design_matrix, components_to_csv,
    district_features_to_csv, embeddings_to_csv, load_embeddings, parse_components,
    parse_district_features, parse_embeddings, pca_fit, ComponentVector, EmbeddingVector,
};
use crate::geo::{BBox, Polygon};
use crate::geojson::{read_feature_collection, to_feature_collection_string};
use crate::layers::{load_districts, District};
use crate::plot::emit_scatter;
use crate::poi::{
    divide_by_four, fit_binary_classifier, fit_poi_logit, holdout_predictions, normalize_scores,
    poi_scores, poi_scores_to_csv, tertile_labels, Class, ClassifierReport, Effect, LogitModel,
    PoiLayer,
};
use crate::proxies::{
    compute_all, parse_proxies, proxies_to_csv, ProxyRecord, PROXY_NAMES, VITALITY,
};
use crate::raster::{
    assign_imagelets, encode_png, load_raster, png_manifest, png_name, tile_imagelets,
    AssignmentTable, Imagelet, ImageletId,
};
use crate::regress::ModelArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Tile,
    Features,
    Proxies,
    Train,
    Eval,
    Loco,
    TwoStage,
    Poi,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Tile,
        Stage::Features,
        Stage::Proxies,
        Stage::Train,
        Stage::Eval,
        Stage::Loco,
        Stage::TwoStage,
        Stage::Poi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Tile => "tile",
            Stage::Features => "features",
            Stage::Proxies => "proxies",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Loco => "loco",
            Stage::TwoStage => "two-stage",
            Stage::Poi => "poi",
        }
    }

    /// Output subdirectory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::TwoStage => "two_stage",
            s => s.name(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| validation!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelector {
    One(Stage),
    All,
}

impl FromStr for StageSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(StageSelector::All)
        } else {
            s.parse().map(StageSelector::One).map_err(|_| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.name()).collect();
                validation!(
                    "unknown stage `{s}`; expected one of {}, all",
                    names.join(", ")
                )
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    settings: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    stages: BTreeMap<String, StageRecord>,
}

/// Exclusive ownership of an output directory for one run.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(".urbanvit.lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(validation!(
                "{} is locked by another run; delete {} if no run is active",
                out.display(),
                path.display()
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files a stage writes, collected before they hit disk.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    fn put(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((rel.into(), bytes.into()));
    }
}

/// One pipeline run over a validated configuration.
pub struct Pipeline<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a PipelineConfig) -> Self {
        Pipeline {
            cfg,
            out: cfg.out_dir.clone(),
        }
    }

    pub fn run(&self, sel: StageSelector) -> Result<Vec<StageOutcome>> {
        let _lock = DirLock::acquire(&self.out)?;
        let stages: Vec<Stage> = match sel {
            StageSelector::One(s) => vec![s],
            StageSelector::All => Stage::ALL
                .into_iter()
                .filter(|&s| self.enabled_in_all(s))
                .collect(),
        };
        let mut outcomes = Vec::new();
        for s in stages {
            outcomes.push(self.run_stage(s)?);
        }
        Ok(outcomes)
    }

    fn enabled_in_all(&self, s: Stage) -> bool {
        match s {
            Stage::Loco if !self.cfg.eval.loco => false,
            Stage::Loco if self.cfg.cities.len() < 2 => {
                warn!("leave-one-city-out skipped: only one city configured");
                false
            }
            Stage::Poi if self.cfg.cities.iter().all(|c| c.pois.is_none()) => {
                warn!("poi stage skipped: no city has a PoI layer");
                false
            }
            _ => true,
        }
    }

    fn artifact(&self, rel: &str, producer: Stage) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                stage: producer.name().to_string(),
            })
        }
    }

    fn read_artifact(&self, rel: &str, producer: Stage) -> Result<String> {
        let p = self.artifact(rel, producer)?;
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    }

    /// Files whose contents determine a stage's outputs, keyed by
    /// location-independent labels.
    fn stage_inputs(&self, s: Stage) -> Result<BTreeMap<String, PathBuf>> {
        let mut m = BTreeMap::new();
        let city_files = |m: &mut BTreeMap<String, PathBuf>, fields: &[&str]| {
            for c in &self.cfg.cities {
                for (field, p) in c.paths() {
                    if fields.contains(&field) {
                        m.insert(format!("city:{}:{field}", c.name), p.to_path_buf());
                    }
                }
            }
        };
        let art = |m: &mut BTreeMap<String, PathBuf>, rel: &str, producer: Stage| -> Result<()> {
            m.insert(rel.to_string(), self.artifact(rel, producer)?);
            Ok(())
        };
        match s {
            Stage::Tile => city_files(&mut m, &["raster", "districts", "boundary"]),
            Stage::Features => {
                city_files(&mut m, &["districts"]);
                art(&mut m, "tile/assignments.csv", Stage::Tile)?;
                match &self.cfg.features.embeddings {
                    Some(p) => {
                        m.insert("embeddings".to_string(), p.clone());
                    }
                    None => art(&mut m, "tile/embeddings.csv", Stage::Tile)?,
                }
            }
            Stage::Proxies => city_files(
                &mut m,
                &[
                    "districts",
                    "blocks",
                    "land_use",
                    "parks",
                    "intersections",
                    "radio_sites",
                    "water",
                    "height_counts",
                    "height_floors",
                ],
            ),
            Stage::Train => {
                art(&mut m, "features/district_features.csv", Stage::Features)?;
                art(&mut m, "proxies/proxies.csv", Stage::Proxies)?;
            }
            Stage::Eval => {
                city_files(&mut m, &["districts"]);
                art(&mut m, "train/dataset.csv", Stage::Train)?;
            }
            Stage::Loco => art(&mut m, "train/dataset.csv", Stage::Train)?,
            Stage::TwoStage => {
                art(&mut m, "train/dataset.csv", Stage::Train)?;
                art(&mut m, "proxies/proxies.csv", Stage::Proxies)?;
            }
            Stage::Poi => {
                city_files(&mut m, &["pois"]);
                art(&mut m, "tile/assignments.csv", Stage::Tile)?;
                art(&mut m, "tile/imagelets.csv", Stage::Tile)?;
                art(&mut m, "features/components.csv", Stage::Features)?;
                art(&mut m, "proxies/proxies.csv", Stage::Proxies)?;
            }
        }
        Ok(m)
    }

    /// Serialized settings a stage depends on, paths excluded.
    fn stage_settings(&self, s: Stage) -> String {
        let c = self.cfg;
        let cities: Vec<&str> = c.cities.iter().map(|c| c.name.as_str()).collect();
        let v = match s {
            Stage::Tile => json!({ "cities": cities, "emit_pngs": c.emit_pngs }),
            Stage::Features => json!({
                "n_comp": c.features.n_comp,
                "pca_on_all_imagelets": c.features.pca_on_all_imagelets,
            }),
            Stage::Proxies => json!({ "cities": cities }),
            Stage::Train => json!({
                "regressor": c.regressor,
                "log": c.preprocess.log_columns,
                "seed": c.stage_seed("train"),
            }),
            Stage::Eval => json!({
                "regressor": c.regressor,
                "log": c.preprocess.log_columns,
                "k": c.eval.k,
                "repeats": c.eval.repeats,
                "seed": c.eval_seed(),
            }),
            Stage::Loco => json!({
                "regressor": c.regressor,
                "log": c.preprocess.log_columns,
                "seed": c.eval_seed(),
            }),
            Stage::TwoStage => json!({
                "two_stage": c.eval.two_stage,
                "log": c.preprocess.log_columns,
                "k": c.eval.k,
                "repeats": c.eval.repeats,
                "seed": c.eval_seed(),
            }),
            Stage::Poi => json!({
                "poi": c.poi,
                "seed": c.stage_seed("poi"),
            }),
        };
        sha256_hex(v.to_string().as_bytes())
    }

    fn manifest_path(&self) -> PathBuf {
        self.out.join("manifest.json")
    }

    fn load_manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        if !p.is_file() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| format_err!("{}: {e}", p.display()))
    }

    fn save_manifest(&self, m: &Manifest) -> Result<()> {
        let p = self.manifest_path();
        let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn is_satisfied(&self, rec: &StageRecord, want: &StageRecord) -> Result<bool> {
        if rec.settings != want.settings || rec.inputs != want.inputs || rec.outputs.is_empty() {
            return Ok(false);
        }
        for (rel, h) in &rec.outputs {
            let p = self.out.join(rel);
            if !p.is_file() || &hash_file(&p)? != h {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn run_stage(&self, s: Stage) -> Result<StageOutcome> {
        let inputs = self.stage_inputs(s)?;
        let mut want = StageRecord {
            settings: self.stage_settings(s),
            ..Default::default()
        };
        for (label, p) in &inputs {
            want.inputs.insert(label.clone(), hash_file(p)?);
        }
        let mut manifest = self.load_manifest()?;
        if let Some(rec) = manifest.stages.get(s.name()) {
            if self.is_satisfied(rec, &want)? {
                info!("stage {s}: inputs unchanged, skipped");
                return Ok(StageOutcome {
                    stage: s,
                    skipped: true,
                    outputs: rec.outputs.keys().cloned().collect(),
                });
            }
        }
        info!("stage {s}: running");
        let arts = match s {
            Stage::Tile => self.tile()?,
            Stage::Features => self.features()?,
            Stage::Proxies => self.proxies()?,
            Stage::Train => self.train()?,
            Stage::Eval => self.eval()?,
            Stage::Loco => self.loco()?,
            Stage::TwoStage => self.two_stage()?,
            Stage::Poi => self.poi()?,
        };
        let dir = self.out.join(s.dir());
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for (rel, bytes) in &arts.files {
            let p = self.out.join(rel);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            want.outputs.insert(rel.clone(), sha256_hex(bytes));
        }
        let outputs = want.outputs.keys().cloned().collect();
        manifest.stages.insert(s.name().to_string(), want);
        self.save_manifest(&manifest)?;
        Ok(StageOutcome {
            stage: s,
            skipped: false,
            outputs,
        })
    }

    fn city_districts(&self) -> Result<Vec<District>> {
        let mut all = Vec::new();
        for c in &self.cfg.cities {
            all.extend(load_districts(&c.districts)?);
        }
        Ok(all)
    }

    fn tile(&self) -> Result<Artifacts> {
        let per_city = crate::eval::par_map(&self.cfg.cities, tile_city);
        let mut entries = Vec::new();
        let mut bounds = String::from("imagelet_id,min_x,min_y,max_x,max_y\n");
        let mut embeddings = Vec::new();
        let mut arts = Artifacts::default();
        let mut all_ims = Vec::new();
        for r in per_city {
            let (ims, table) = r?;
            for im in &ims {
                let b = im.bounds.bbox();
                bounds.push_str(&format!(
                    "{},{},{},{},{}\n",
                    im.id, b.min_x, b.min_y, b.max_x, b.max_y
                ));
                embeddings.push(EmbeddingVector {
                    imagelet_id: im.id.clone(),
                    z: baseline_features(&im.pixels),
                });
            }
            if self.cfg.emit_pngs {
                for im in &ims {
                    arts.put(
                        format!("tile/imagelets/{}", png_name(&im.id)),
                        encode_png(im),
                    );
                }
                all_ims.extend(ims);
            }
            entries.extend(table.entries);
        }
        if self.cfg.emit_pngs {
            arts.put("tile/imagelets/manifest.csv", png_manifest(&all_ims));
        }
        let table = AssignmentTable::from_entries(entries);
        for (city, n) in &table.counts {
            info!("{city}: {n} imagelets assigned");
        }
        arts.put("tile/assignments.csv", table.to_csv());
        arts.put("tile/imagelets.csv", bounds);
        arts.put("tile/embeddings.csv", embeddings_to_csv(&embeddings)?);
        Ok(arts)
    }

    fn features(&self) -> Result<Artifacts> {
        let table =
            AssignmentTable::parse_csv(&self.read_artifact("tile/assignments.csv", Stage::Tile)?)?;
        let embeddings = match &self.cfg.features.embeddings {
            Some(p) => load_embeddings(p)?,
            None => parse_embeddings(&self.read_artifact("tile/embeddings.csv", Stage::Tile)?)?,
        };
        let district_of = table.district_of();
        let fit_rows: Vec<Vec<f64>> = embeddings
            .iter()
            .filter(|e| {
                self.cfg.features.pca_on_all_imagelets || district_of.contains_key(&e.imagelet_id)
            })
            .map(|e| e.z.clone())
            .collect();
        let pca = pca_fit(&fit_rows, self.cfg.features.n_comp)?;
        if pca.reduced_rank {
            warn!(
                "embeddings span fewer than {} informative directions",
                self.cfg.features.n_comp
            );
        }
        let components = embeddings
            .iter()
            .map(|e| {
                Ok(ComponentVector {
                    imagelet_id: e.imagelet_id.clone(),
                    v: pca.transform(&e.z)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut by_district: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        for c in &components {
            if let Some(d) = district_of.get(&c.imagelet_id) {
                by_district.entry(d).or_default().push(c.v.clone());
            }
        }
        let missing = table
            .entries
            .iter()
            .filter(|e| e.district_id.is_some())
            .filter(|e| !components.iter().any(|c| c.imagelet_id == e.imagelet_id))
            .count();
        if missing > 0 {
            warn!("{missing} assigned imagelets have no embedding");
        }
        let mut fvs = Vec::new();
        for d in self.city_districts()? {
            match by_district.get(d.district_id.as_str()) {
                Some(vs) => fvs.push(aggregate_district(
                    &d.district_id,
                    &d.city,
                    vs,
                    d.polygon.centroid()?,
                )?),
                None => warn!("district {} has no imagelets; left out", d.district_id),
            }
        }
        let mut arts = Artifacts::default();
        let mut pca_json = serde_json::to_string_pretty(&pca).expect("PCA serializes");
        pca_json.push('\n');
        arts.put("features/pca.json", pca_json);
        arts.put("features/components.csv", components_to_csv(&components)?);
        arts.put(
            "features/district_features.csv",
            district_features_to_csv(&fvs)?,
        );
        Ok(arts)
    }

    fn proxies(&self) -> Result<Artifacts> {
        let per_city = crate::eval::par_map(&self.cfg.cities, |c| {
            let layers = load_city_layers(c)?;
            Ok::<_, Error>(compute_all(&layers.districts, &layers.proxies))
        });
        let mut records = Vec::new();
        let mut issues = csv::Writer::from_writer(Vec::new());
        issues
            .write_record(["district_id", "field", "message"])
            .expect("in-memory write");
        for r in per_city {
            let r = r?;
            for i in &r.issues {
                warn!("{} {}: {}", i.district_id, i.field, i.message);
                issues
                    .write_record([i.district_id.as_str(), i.field, i.message.as_str()])
                    .expect("in-memory write");
            }
            records.extend(r.records);
        }
        let mut arts = Artifacts::default();
        arts.put("proxies/proxies.csv", proxies_to_csv(&records));
        arts.put(
            "proxies/issues.csv",
            issues.into_inner().expect("in-memory flush"),
        );
        Ok(arts)
    }

    fn is_log(&self) -> impl Fn(&str) -> bool + '_ {
        move |c: &str| self.cfg.preprocess.is_log(c)
    }

    fn train(&self) -> Result<Artifacts> {
        let fvs = parse_district_features(
            &self.read_artifact("features/district_features.csv", Stage::Features)?,
        )?;
        let proxies = parse_proxies(&self.read_artifact("proxies/proxies.csv", Stage::Proxies)?)?;
        let vitality: BTreeMap<&str, f64> = proxies
            .iter()
            .filter_map(|r| r.activity_density.map(|v| (r.district_id.as_str(), v)))
            .collect();
        let dm = build_design_matrix(&fvs)?;
        let is_log = self.is_log();
        let mut data = Dataset {
            district_ids: Vec::new(),
            cities: Vec::new(),
            log_x: dm.columns.iter().map(|c| is_log(c)).collect(),
            columns: dm.columns.clone(),
            x: Vec::new(),
            target: VITALITY.to_string(),
            log_y: is_log(VITALITY),
            y: Vec::new(),
        };
        for ((id, city), row) in dm.district_ids.iter().zip(&dm.cities).zip(&dm.rows) {
            match vitality.get(id.as_str()) {
                Some(&v) => {
                    data.district_ids.push(id.clone());
                    data.cities.push(city.clone());
                    data.x.push(row.clone());
                    data.y.push(v);
                }
                None => warn!("district {id} has no activity density; left out of training"),
            }
        }
        if data.len() < 2 {
            return Err(validation!(
                "only {} districts have both features and vitality",
                data.len()
            ));
        }
        let model = ModelArtifact::fit(
            &self.cfg.regressor,
            self.cfg.stage_seed("train"),
            &data.x,
            &data.y,
            &data.columns,
            &data.log_x,
            &data.target,
            data.log_y,
        )?;
        let mut arts = Artifacts::default();
        arts.put("train/dataset.csv", data.to_csv());
        arts.put(
            format!("train/model_{}.json", self.cfg.regressor.family()),
            model.to_json(),
        );
        Ok(arts)
    }

    fn dataset(&self) -> Result<Dataset> {
        let d = Dataset::parse_csv(
            &self.read_artifact("train/dataset.csv", Stage::Train)?,
            self.is_log(),
        )?;
        d.validate()?;
        Ok(d)
    }

    fn plan(&self, n: usize) -> Result<FoldPlan> {
        FoldPlan::new(
            n,
            self.cfg.eval.k,
            self.cfg.eval.repeats,
            self.cfg.eval_seed(),
        )
    }

    fn report_artifacts(
        &self,
        arts: &mut Artifacts,
        dir: &str,
        report: &EvalReport,
        districts: Option<&[District]>,
    ) -> Result<()> {
        arts.put(format!("{dir}/report.json"), report.to_json());
        arts.put(format!("{dir}/predictions.csv"), residuals_to_csv(report));
        if let Some(ds) = districts {
            arts.put(
                format!("{dir}/residuals.geojson"),
                to_feature_collection_string(&residual_features(report, ds)?),
            );
        }
        match emit_scatter(report) {
            Ok(svg) => arts.put(format!("{dir}/scatter.svg"), svg),
            Err(e) => warn!("{dir}: no scatter plot: {e}"),
        }
        Ok(())
    }

    fn eval(&self) -> Result<Artifacts> {
        let data = self.dataset()?;
        let report = repeated_kfold(&self.cfg.regressor, &data, &self.plan(data.len())?)?;
        log_summary("eval", &report);
        let mut arts = Artifacts::default();
        self.report_artifacts(&mut arts, "eval", &report, Some(&self.city_districts()?))?;
        Ok(arts)
    }

    fn loco(&self) -> Result<Artifacts> {
        let data = self.dataset()?;
        let reports = leave_one_city_out(&self.cfg.regressor, &data, self.cfg.eval_seed())?;
        let mut arts = Artifacts::default();
        let mut summary = String::from("city,n,r2,r2_adj,mae\n");
        let fmt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (city, r) in &reports {
            log_summary(&format!("loco {city}"), r);
            summary.push_str(&format!(
                "{city},{},{},{},{}\n",
                r.districts.len(),
                fmt(r.r2.map(|s| s.mean)),
                fmt(r.r2_adj.map(|s| s.mean)),
                fmt(r.mae.map(|s| s.mean))
            ));
            self.report_artifacts(&mut arts, &format!("loco/{city}"), r, None)?;
        }
        arts.put("loco/summary.csv", summary);
        Ok(arts)
    }

    fn two_stage(&self) -> Result<Artifacts> {
        let data = self.dataset()?;
        let proxies = parse_proxies(&self.read_artifact("proxies/proxies.csv", Stage::Proxies)?)?;
        let by_id: BTreeMap<&str, &ProxyRecord> = proxies
            .iter()
            .map(|r| (r.district_id.as_str(), r))
            .collect();
        let keep: Vec<usize> = (0..data.len())
            .filter(|&i| {
                let ok = by_id
                    .get(data.district_ids[i].as_str())
                    .is_some_and(|r| r.proxies().iter().all(Option::is_some));
                if !ok {
                    warn!(
                        "district {} lacks a proxy value; left out of the two-stage model",
                        data.district_ids[i]
                    );
                }
                ok
            })
            .collect();
        let data = subset(&data, &keep);
        let targets = ProxyTargets {
            names: PROXY_NAMES.iter().map(|s| s.to_string()).collect(),
            log: PROXY_NAMES
                .iter()
                .map(|n| self.cfg.preprocess.is_log(n))
                .collect(),
            values: data
                .district_ids
                .iter()
                .map(|id| {
                    by_id[id.as_str()]
                        .proxies()
                        .iter()
                        .map(|v| v.expect("filtered"))
                        .collect()
                })
                .collect(),
        };
        let ts = &self.cfg.eval.two_stage;
        let spec = TwoStageSpec {
            stage1: ts.stage1_family.clone(),
            stage2: ts.stage2_family.clone(),
            train_on_true_proxies: ts.train_on_true_proxies,
        };
        let report = two_stage_vitality(&spec, &data, &targets, &self.plan(data.len())?)?;
        log_summary("two-stage", &report);
        let mut arts = Artifacts::default();
        self.report_artifacts(&mut arts, "two_stage", &report, None)?;
        Ok(arts)
    }

    fn poi(&self) -> Result<Artifacts> {
        let table =
            AssignmentTable::parse_csv(&self.read_artifact("tile/assignments.csv", Stage::Tile)?)?;
        let bounds = parse_bounds(&self.read_artifact("tile/imagelets.csv", Stage::Tile)?)?;
        let components =
            parse_components(&self.read_artifact("features/components.csv", Stage::Features)?)?;
        let proxies = parse_proxies(&self.read_artifact("proxies/proxies.csv", Stage::Proxies)?)?;
        let mut pois: BTreeMap<&str, PoiLayer> = BTreeMap::new();
        for c in &self.cfg.cities {
            if let Some(p) = &c.pois {
                pois.insert(
                    &c.name,
                    crate::poi::poi_layer_from_features(&read_feature_collection(p)?)?,
                );
            }
        }
        if pois.values().all(|l| l.points.is_empty()) {
            return Err(Error::MissingData("no PoIs in any configured city".into()));
        }
        let district_of = table.district_of();
        let comp: BTreeMap<&ImageletId, &Vec<f64>> =
            components.iter().map(|c| (&c.imagelet_id, &c.v)).collect();
        let ims: Vec<(ImageletId, BBox)> = bounds
            .into_iter()
            .filter(|(id, _)| district_of.contains_key(id) && comp.contains_key(id))
            .collect();
        // Cities may share coordinate ranges, so PoIs are counted per city.
        let empty = PoiLayer::default();
        let mut scores = Vec::with_capacity(ims.len());
        for c in &self.cfg.cities {
            let city_ims: Vec<(ImageletId, BBox)> = ims
                .iter()
                .filter(|(id, _)| id.city == c.name)
                .cloned()
                .collect();
            scores.extend(poi_scores(
                &city_ims,
                pois.get(c.name.as_str()).unwrap_or(&empty),
            ));
        }
        let order: BTreeMap<&ImageletId, usize> =
            ims.iter().enumerate().map(|(i, (id, _))| (id, i)).collect();
        scores.sort_by_key(|s| order[&s.imagelet_id]);
        normalize_scores(&mut scores);
        let by_id: BTreeMap<&str, &ProxyRecord> = proxies
            .iter()
            .map(|r| (r.district_id.as_str(), r))
            .collect();

        let mut arts = Artifacts::default();
        let mut results = Vec::new();
        for var in &self.cfg.poi.variables {
            let rows: Vec<(usize, f64)> = ims
                .iter()
                .enumerate()
                .filter_map(|(i, (id, _))| {
                    let r = by_id.get(district_of[id])?;
                    let v = if var == "small_blocks" {
                        r.block_size.map(|b| -b)
                    } else {
                        r.get(var)
                    };
                    v.map(|v| (i, v))
                })
                .collect();
            let seed = stage_seed(self.cfg.stage_seed("poi"), var);
            let (result, classes) =
                poi_variable(var, &rows, &ims, &comp, &scores, self.cfg.poi.folds, seed);
            if let Some(e) = &result.error {
                warn!("poi `{var}`: {e}");
            }
            arts.put(
                format!("poi/scores_{var}.csv"),
                poi_scores_to_csv(&scores, &classes),
            );
            results.push(result);
        }
        let mut report = serde_json::to_string_pretty(
            &json!({ "n_imagelets": ims.len(), "variables": results }),
        )
        .expect("PoI report serializes");
        report.push('\n');
        arts.put("poi/report.json", report);
        Ok(arts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiVariableReport {
    pub variable: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub n_high: usize,
    pub n_low: usize,
    pub classifier: Option<ClassifierReport>,
    pub logit: Option<LogitModel>,
    pub effects: Vec<Effect>,
    pub summary: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn poi_variable(
    var: &str,
    rows: &[(usize, f64)],
    ims: &[(ImageletId, BBox)],
    comp: &BTreeMap<&ImageletId, &Vec<f64>>,
    scores: &[crate::poi::PoiScores],
    folds: usize,
    seed: u64,
) -> (PoiVariableReport, Vec<Option<bool>>) {
    let mut rep = PoiVariableReport {
        variable: var.to_string(),
        lower: None,
        upper: None,
        n_high: 0,
        n_low: 0,
        classifier: None,
        logit: None,
        effects: Vec::new(),
        summary: Vec::new(),
        error: None,
    };
    let mut classes = vec![None; scores.len()];
    let values: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let result = (|| -> Result<()> {
        let t = tertile_labels(&values, var)?;
        rep.lower = Some(t.lower);
        rep.upper = Some(t.upper);
        rep.n_high = t.count(Class::High);
        rep.n_low = t.count(Class::Low);
        let labeled: Vec<(usize, bool)> = rows
            .iter()
            .zip(&t.labels)
            .filter_map(|(&(i, _), l)| l.map(|c| (i, c == Class::High)))
            .collect();
        let x: Vec<Vec<f64>> = labeled
            .iter()
            .map(|&(i, _)| comp[&ims[i].0].clone())
            .collect();
        let y: Vec<bool> = labeled.iter().map(|&(_, l)| l).collect();
        rep.classifier = Some(fit_binary_classifier(var, &x, &y, folds, seed)?);
        let held = holdout_predictions(var, &x, &y, seed)?;
        let test_scores: Vec<_> = held
            .test
            .iter()
            .map(|&k| scores[labeled[k].0].clone())
            .collect();
        for (&k, &c) in held.test.iter().zip(&held.predicted) {
            classes[labeled[k].0] = Some(c);
        }
        let model = fit_poi_logit(var, &held.predicted, &test_scores)?;
        rep.effects = divide_by_four(&model);
        rep.summary = rep.effects.iter().map(ToString::to_string).collect();
        rep.logit = Some(model);
        Ok(())
    })();
    if let Err(e) = result {
        rep.error = Some(e.to_string());
    }
    (rep, classes)
}

fn log_summary(what: &str, r: &EvalReport) {
    let show = |s: Option<crate::eval::Stat>| {
        s.map_or("n/a".to_string(), |s| {
            format!("{:.3} ± {:.3}", s.mean, s.std)
        })
    };
    info!(
        "{what}: R² {} R²adj {} MAE {} ({} failed folds)",
        show(r.r2),
        show(r.r2_adj),
        show(r.mae),
        r.failed_folds
    );
}

fn subset(d: &Dataset, keep: &[usize]) -> Dataset {
    Dataset {
        district_ids: keep.iter().map(|&i| d.district_ids[i].clone()).collect(),
        cities: keep.iter().map(|&i| d.cities[i].clone()).collect(),
        columns: d.columns.clone(),
        log_x: d.log_x.clone(),
        x: keep.iter().map(|&i| d.x[i].clone()).collect(),
        target: d.target.clone(),
        log_y: d.log_y,
        y: keep.iter().map(|&i| d.y[i]).collect(),
    }
}

fn city_boundary(c: &CityInputs, districts: &[District]) -> Result<Polygon> {
    if let Some(p) = &c.boundary {
        let fs = read_feature_collection(p)?;
        let first = fs
            .first()
            .ok_or_else(|| validation!("boundary file {} is empty", p.display()))?;
        let polys = first.polygons()?;
        return polys
            .first()
            .map(|p| (*p).clone())
            .ok_or_else(|| validation!("boundary file {} has no polygon", p.display()));
    }
    let bb = districts
        .iter()
        .map(|d| d.polygon.bbox())
        .reduce(|a, b| a.union(&b))
        .ok_or_else(|| validation!("city `{}` has no districts", c.name))?;
    bb.to_polygon()
}

fn tile_city(c: &CityInputs) -> Result<(Vec<Imagelet>, AssignmentTable)> {
    let raster = load_raster(&c.raster)?;
    let districts = load_districts(&c.districts)?;
    let boundary = city_boundary(c, &districts)?;
    let ims = tile_imagelets(&raster, &c.name, &boundary);
    let table = assign_imagelets(&ims, &districts);
    Ok((ims, table))
}

/// Parses `imagelet_id,min_x,min_y,max_x,max_y`.
pub fn parse_bounds(text: &str) -> Result<Vec<(ImageletId, BBox)>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| format_err!("imagelet bounds header: {e}"))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["imagelet_id", "min_x", "min_y", "max_x", "max_y"] {
        return Err(format_err!(
            "imagelet bounds header must be `imagelet_id,min_x,min_y,max_x,max_y`"
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| format_err!("imagelet bounds row {}: {e}", i + 1))?;
        let id: ImageletId = rec[0].parse()?;
        let v = rec
            .iter()
            .skip(1)
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format_err!("imagelet bounds row {}: bad number `{s}`", i + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        if !(v[0] <= v[2] && v[1] <= v[3]) {
            return Err(format_err!(
                "imagelet bounds row {}: min exceeds max",
                i + 1
            ));
        }
        out.push((
            id,
            BBox {
                min_x: v[0],
                min_y: v[1],
                max_x: v[2],
                max_y: v[3],
            },
        ));
    }
    Ok(out)
}

/// Re-renders the scatter plot of a stored report.
pub fn render_report(report_json: &str) -> Result<String> {
    emit_scatter(&EvalReport::from_json(report_json)?)
}

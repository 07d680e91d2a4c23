use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skybench::curriculum::{
    build_distance_cache, cacs_sample, composed_sample, pvs_counts, pvs_sample, CurriculumProgress, DistanceCache,
    PvsCounts,
};
use skybench::eval::{
    aggregate_reports, format_aggregate, format_report, pair_errors_with, rra_rta, BucketRule, EvalConfig,
    MetricReport, TableStyle, TranslationMode,
};
use skybench::geometry::{CameraVector9, Pose};
use skybench::model::{
    compute_loss, skynet_forward, Frame, GroundTruthFrame, LossParts, ModelConfig, ModelWeights, Stream, WeightBank,
};
use skybench::scene::{
    generate_site, read_manifest, render_depth, render_image, write_manifest, write_site, AerialConfig, GroundConfig,
    Modality, SatelliteConfig, SiteConfig, SiteManifest,
};
use skybench::tiles::{stitch_grid, CachedFetcher, TileError, UreqClient};

use crate::args::*;
use crate::UsageError;

pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn usage(msg: String) -> anyhow::Error {
    anyhow!(UsageError(msg))
}

fn load_manifest(path: &Path) -> Result<SiteManifest> {
    read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

// ---------------------------------------------------------------------------
// gen-site

fn check_band(flag: &str, m: Modality, v: f64) -> Result<()> {
    let (lo, hi) = m.altitude_band();
    if !(lo..=hi).contains(&v) {
        return Err(usage(format!("{flag} {v} is outside the {m} altitude band [{lo}, {hi}] m")));
    }
    Ok(())
}

pub fn gen_site(g: &Globals, a: &GenSiteArgs) -> Result<()> {
    check_band("--ground-altitude", Modality::Ground, a.ground_altitude)?;
    check_band("--satellite-altitude", Modality::Satellite, a.satellite_altitude)?;
    if !(a.ground_radius > 0.0) {
        return Err(usage(format!("--ground-radius must be > 0, got {}", a.ground_radius)));
    }
    let frames: [usize; 3] =
        a.aerial_frames.clone().try_into().map_err(|_| usage("--aerial-frames takes three counts".into()))?;
    let cfg = SiteConfig {
        site_id: a.site_id.clone(),
        seed: g.seed,
        ground: GroundConfig {
            n: a.ground_n,
            altitude: a.ground_altitude,
            radius: a.ground_radius,
            ..Default::default()
        },
        aerial: AerialConfig::with_frames(frames),
        satellite: SatelliteConfig { n: a.satellite_n, altitude: a.satellite_altitude, ..Default::default() },
        ..Default::default()
    };
    let site = generate_site(&cfg)?;
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    if a.skip_depth {
        write_manifest(&site.manifest, &g.out_dir)?;
    } else {
        write_site(&site, &g.out_dir)?;
    }
    let m = &site.manifest;
    println!(
        "site {}: {} views (ground {}, aerial {}, satellite {}) -> {}",
        m.site_id,
        m.views.len(),
        m.count(Modality::Ground),
        m.count(Modality::Aerial),
        m.count(Modality::Satellite),
        g.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Serialize)]
struct SampleOutput {
    mode: &'static str,
    tau: f64,
    n: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    anchor: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    counts: Option<CountsOut>,
    ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct CountsOut {
    ground: usize,
    aerial: usize,
    satellite: usize,
}

impl From<PvsCounts> for CountsOut {
    fn from(c: PvsCounts) -> Self {
        Self { ground: c.n_g, aerial: c.n_a, satellite: c.n_s }
    }
}

fn distance_cache(manifest: &SiteManifest, a: &SampleArgs) -> Result<DistanceCache> {
    let ids: Vec<String> = manifest.views.iter().map(|v| v.id.clone()).collect();
    if let Some(path) = &a.cache {
        if path.exists() {
            return DistanceCache::read(path, ids).with_context(|| format!("--cache {}", path.display()));
        }
    }
    let cache = build_distance_cache(&manifest.views, a.lambda_t).map_err(|e| usage(format!("--lambda-t: {e}")))?;
    if let Some(path) = &a.cache {
        cache.write(path).with_context(|| format!("writing --cache {}", path.display()))?;
    }
    Ok(cache)
}

/// Explicit anchor, or a seeded pick among ground views.
fn anchor_index(manifest: &SiteManifest, anchor: Option<&str>, seed: u64) -> Result<usize> {
    if let Some(id) = anchor {
        return manifest
            .views
            .iter()
            .position(|v| v.id == id)
            .ok_or_else(|| anyhow!("--anchor {id}: no such view in the manifest"));
    }
    let ground: Vec<usize> =
        (0..manifest.views.len()).filter(|&i| manifest.views[i].modality == Modality::Ground).collect();
    if ground.is_empty() {
        bail!("the manifest has no ground views to anchor on; pass --anchor");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ground[rng.random_range(0..ground.len())])
}

pub fn sample(g: &Globals, a: &SampleArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let progress = CurriculumProgress::new(a.tau).map_err(|e| usage(format!("--tau: {e}")))?;
    let (mode, anchor, counts, ids) = match a.mode {
        SampleMode::Cacs => {
            let cache = distance_cache(&manifest, a)?;
            let anchor = anchor_index(&manifest, a.anchor.as_deref(), g.seed)?;
            let picked = cacs_sample(anchor, &cache, a.n, progress)?;
            let ids = picked.into_iter().map(|i| manifest.views[i].id.clone()).collect();
            ("cacs", Some(manifest.views[anchor].id.clone()), None, ids)
        }
        SampleMode::Pvs => {
            let counts = pvs_counts(a.n, progress).map_err(|e| usage(format!("--n: {e}")))?;
            ("pvs", None, Some(counts), pvs_sample(&manifest, counts, g.seed)?)
        }
        SampleMode::Composed => {
            let counts = pvs_counts(a.n, progress).map_err(|e| usage(format!("--n: {e}")))?;
            let cache = distance_cache(&manifest, a)?;
            let anchor = anchor_index(&manifest, a.anchor.as_deref(), g.seed)?;
            let ids = composed_sample(&manifest, &cache, anchor, counts, progress)?;
            ("composed", Some(manifest.views[anchor].id.clone()), Some(counts), ids)
        }
    };
    if a.json {
        let out = SampleOutput { mode, tau: a.tau, n: a.n, seed: g.seed, anchor, counts: counts.map(Into::into), ids };
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        if let Some(anchor) = anchor {
            eprintln!("anchor: {anchor}");
        }
        for id in ids {
            println!("{id}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// forward

/// Per-frame entry of `cameras.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: String,
    pub modality: Modality,
    pub stream: Stream,
    pub camera: CameraVector9,
    pub depth_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamerasFile {
    pub model: ModelConfig,
    pub frames: Vec<CameraRecord>,
}

#[derive(Debug, Serialize)]
struct LossFile {
    alpha: f64,
    #[serde(flatten)]
    parts: LossParts,
}

fn read_ids(a: &ForwardArgs) -> Result<Vec<String>> {
    let ids: Vec<String> = match &a.ids_file {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("--ids-file {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => a.ids.iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
    };
    if ids.is_empty() {
        return Err(usage("--ids: no view ids given".into()));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(usage(format!("--ids: {dup} listed twice")));
    }
    Ok(ids)
}

fn model_config(a: &ForwardArgs, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match &a.model_config {
        None => ModelConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("--model-config {}", path.display()))?;
            let parsed: Result<ModelConfig> = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(Into::into)
            } else {
                toml::from_str(&text).map_err(Into::into)
            };
            parsed.map_err(|e| usage(format!("--model-config {}: {e}", path.display())))?
        }
    };
    cfg.seed = seed;
    cfg.validate().map_err(|e| usage(format!("--model-config: {e}")))?;
    Ok(cfg)
}

pub fn forward(g: &Globals, a: &ForwardArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let ids = read_ids(a)?;
    let bank = match &a.weights {
        Some(path) => WeightBank::read(path).with_context(|| format!("--weights {}", path.display()))?,
        None => WeightBank::generate(&model_config(a, g.seed)?)?,
    };
    let weights = ModelWeights::from_bank(&bank)?;
    let cfg = weights.config().clone();
    let scene = manifest
        .scene
        .as_ref()
        .ok_or_else(|| anyhow!("manifest {} carries no scene; frames cannot be rendered", a.manifest.display()))?;

    let mut frames = Vec::with_capacity(ids.len());
    let mut gt = Vec::with_capacity(ids.len());
    for id in &ids {
        let view = manifest.view(id).ok_or_else(|| anyhow!("--ids: view {id} is not in the manifest"))?;
        let k = view.intrinsics().scaled_to(cfg.image_width, cfg.image_height);
        let pose = view.pose();
        frames.push(Frame { id: id.clone(), modality: view.modality, image: render_image(scene, &pose, &k)? });
        gt.push(GroundTruthFrame {
            id: id.clone(),
            modality: view.modality,
            camera: CameraVector9::from_pose(&pose, &k),
            depth: Some(render_depth(scene, &pose, &k)?),
        });
    }
    let out = skynet_forward(&frames, &weights)?;
    let loss = compute_loss(&out, &gt, a.alpha)?;

    fs::create_dir_all(g.out_dir.join("depth")).with_context(|| format!("creating {}", g.out_dir.display()))?;
    let mut records = Vec::with_capacity(out.frames.len());
    for f in &out.frames {
        let depth_path = format!("depth/{}.skyd", f.id);
        f.depth.write(&g.out_dir.join(&depth_path))?;
        records.push(CameraRecord {
            id: f.id.clone(),
            modality: f.modality,
            stream: f.stream,
            camera: f.camera,
            depth_path,
        });
    }
    let cameras = CamerasFile { model: cfg, frames: records };
    fs::write(g.out_dir.join("cameras.json"), serde_json::to_string_pretty(&cameras)? + "\n")?;
    fs::write(
        g.out_dir.join("loss.json"),
        serde_json::to_string_pretty(&LossFile { alpha: a.alpha, parts: loss })? + "\n",
    )?;
    if a.save_weights {
        bank.write(&g.out_dir.join("weights.bin"))?;
    }
    for f in &out.frames {
        println!("{} {} {:?}", f.id, f.modality, f.stream);
    }
    println!(
        "loss {:.6} (camera sat {:.6}, camera ground/aerial {:.6}, depth {:.6})",
        loss.total, loss.cam_sat, loss.cam_ground_aerial, loss.depth
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

/// Poses keyed by id, in file order, from a manifest or a camera file.
struct PoseSet {
    order: Vec<String>,
    poses: HashMap<String, (Modality, Pose)>,
    is_manifest: bool,
}

fn load_poses(path: &Path, flag: &str) -> Result<PoseSet> {
    let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).with_context(|| format!("{flag} {}", file.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{flag} {}: not JSON", file.display()))?;
    let (entries, is_manifest): (Vec<(String, Modality, Pose)>, bool) = if value.get("views").is_some() {
        let m = load_manifest(&file)?;
        (m.views.iter().map(|v| (v.id.clone(), v.modality, v.pose())).collect(), true)
    } else if value.get("frames").is_some() {
        let c: CamerasFile =
            serde_json::from_value(value).with_context(|| format!("{flag} {}: malformed camera file", file.display()))?;
        (c.frames.iter().map(|f| (f.id.clone(), f.modality, f.camera.pose())).collect(), false)
    } else {
        bail!("{flag} {}: neither a manifest nor a camera file", file.display());
    };
    let mut set = PoseSet { order: Vec::new(), poses: HashMap::new(), is_manifest };
    for (id, m, p) in entries {
        if set.poses.insert(id.clone(), (m, p)).is_some() {
            bail!("{flag} {}: duplicate id {id}", file.display());
        }
        set.order.push(id);
    }
    Ok(set)
}

fn evaluate_site(pred_path: &Path, gt_path: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let pred = load_poses(pred_path, "--pred")?;
    let gt = load_poses(gt_path, "--gt")?;
    let (mut p, mut g, mut tags) = (Vec::new(), Vec::new(), Vec::new());
    for id in &pred.order {
        let (pm, pp) = pred.poses[id];
        let (gm, gp) = *gt.poses.get(id).ok_or_else(|| anyhow!("--pred id {id} has no ground truth in {}", gt_path.display()))?;
        if pm != gm {
            bail!("id {id}: predicted as {pm} but ground truth is {gm}");
        }
        p.push(pp);
        g.push(gp);
        tags.push(gm);
    }
    if !gt.is_manifest {
        if let Some(id) = gt.order.iter().find(|id| !pred.poses.contains_key(*id)) {
            bail!("--gt id {id} has no prediction in {}", pred_path.display());
        }
    }
    let errors = pair_errors_with(&p, &g, &tags, cfg.translation)?;
    Ok(rra_rta(&errors, cfg)?)
}

pub fn eval(g: &Globals, a: &EvalArgs) -> Result<()> {
    if a.pred.len() != a.gt.len() {
        return Err(usage(format!("{} --pred files but {} --gt files", a.pred.len(), a.gt.len())));
    }
    let cfg = EvalConfig {
        rot_threshold_deg: a.rot_threshold.unwrap_or(a.threshold),
        trans_threshold: a.trans_threshold.unwrap_or(a.threshold),
        bucket_rule: match a.bucket_rule {
            BucketRuleArg::Pair => BucketRule::Pair,
            BucketRuleArg::ImageAnchored => BucketRule::ImageAnchored,
        },
        translation: match a.translation {
            TranslationArg::Angular => TranslationMode::Angular,
            TranslationArg::Metric => TranslationMode::Metric,
        },
    };
    cfg.validate().map_err(|e| usage(format!("--threshold: {e}")))?;
    let style = match a.style {
        StyleArg::Full => TableStyle::Full,
        StyleArg::Compact => TableStyle::Compact,
    };

    let reports = a
        .pred
        .iter()
        .zip(&a.gt)
        .map(|(p, gt)| evaluate_site(p, gt, &cfg))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&g.out_dir).with_context(|| format!("creating {}", g.out_dir.display()))?;
    if let [report] = reports.as_slice() {
        print!("{}", format_report(report, style));
        fs::write(g.out_dir.join("report.json"), serde_json::to_string_pretty(report)? + "\n")?;
    } else {
        for (i, r) in reports.iter().enumerate() {
            println!("site {} ({})", i, a.pred[i].display());
            print!("{}", format_report(r, style));
        }
        let agg = aggregate_reports(&reports)?;
        print!("{}", format_aggregate(&agg));
        let json = serde_json::json!({ "sites": reports, "aggregate": agg });
        fs::write(g.out_dir.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// fetch-tiles

pub fn fetch_tiles(g: &Globals, a: &FetchTilesArgs) -> Result<()> {
    if a.grid == 0 || a.grid.is_multiple_of(2) {
        return Err(usage(format!("--grid must be odd and ≥ 1, got {}", a.grid)));
    }
    let cache = a.cache.clone().unwrap_or_else(|| g.out_dir.join("tiles"));
    let mut fetcher = if a.offline {
        CachedFetcher::offline(&cache)
    } else {
        CachedFetcher::online(&cache, Box::new(UreqClient::new(Duration::from_secs(a.timeout_secs))))
    };
    if let Some(endpoint) = &a.endpoint {
        fetcher = fetcher.with_base_url(endpoint.clone());
    }
    let stitched = stitch_grid(a.lat, a.lon, a.zoom, a.grid, &fetcher).map_err(|e| match e {
        TileError::OutOfProjection(_) => usage(format!("--lat: {e}")),
        TileError::InvalidInput(_) => usage(e.to_string()),
        e => e.into(),
    })?;
    for miss in &stitched.misses {
        eprintln!("missing tile {}: {}", miss.tile, miss.error);
    }
    let total = (a.grid * a.grid) as usize;
    if stitched.misses.len() == total || (a.strict && !stitched.misses.is_empty()) {
        let missing = stitched.misses.len();
        let first = stitched.misses.into_iter().next().expect("at least one miss").error;
        return Err(anyhow::Error::new(first).context(format!("{missing} of {total} tiles missing")));
    }
    let output = a.output.clone().unwrap_or_else(|| g.out_dir.join("stitched.png"));
    if let Some(parent) = output.parent() {
        fs::create_dir_all(parent)?;
    }
    stitched.save_png(&output)?;
    println!(
        "{} ({}x{} px, {} of {total} tiles, {} missing)",
        output.display(),
        stitched.image.width(),
        stitched.image.height(),
        total - stitched.misses.len(),
        stitched.misses.len()
    );
    Ok(())
}

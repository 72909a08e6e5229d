use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stripdet_core::diagnostics::{run_gradcheck_suite, GradcheckCase, GradcheckScope};
use stripdet_core::dota::{
    format_dota_annotations, merge_tile_detections, parse_dota_annotations, parse_tile_name, tile_ground_truth,
    tile_image, tile_name, ClipMode, TileDetections, DEFAULT_OVERLAP, MULTI_SCALES, MULTI_SCALE_OVERLAP,
};
use stripdet_core::eval::{evaluate, format_report_table, ApMetric, ArBins, DetectionRecord, GroundTruthRecord};
use stripdet_core::geometry::{format_detections, parse_detections};
use stripdet_core::image::{crop, read_image, resize_bilinear};
use stripdet_core::strip::{
    count_parameters, estimate_flops, layer_costs, receptive_field_map, reference_cost, ModuleDesign, Probe,
    StripModuleParams, StripOrder, VariantConfig, FLOPS_TOLERANCE, PARAM_TOLERANCE,
};
use stripdet_core::synth::{compare_square_vs_strip, ExperimentConfig};

use crate::output::{invalid, OutDir};
use crate::{
    Cli, Command, CostArgs, EvalArgs, ExperimentArgs, GradcheckArgs, IngestArgs, MergeArgs, RfmapArgs, TileArgs,
};

/// Returns `Ok(false)` when the command ran but its check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    let t = cli.threads;
    match &cli.command {
        Command::Gradcheck(a) => gradcheck(a, t),
        Command::Rfmap(a) => rfmap(a, t),
        Command::Params(a) => costs(a, t, false),
        Command::Flops(a) => costs(a, t, true),
        Command::Ingest(a) => ingest(a, t),
        Command::Tile(a) => tile(a, t),
        Command::Merge(a) => merge(a, t),
        Command::Eval(a) => eval(a, t),
        Command::Experiment(a) => experiment(a, t),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| invalid(format!("bad {what} value {p:?}"))))
        .collect()
}

fn require_exists(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{} does not exist", p.display())))
    }
}

/// `path` itself if it is a file, else its files with extension `ext`, sorted.
fn input_files(path: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    require_exists(path)?;
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == ext));
    files.sort();
    Ok(files)
}

fn stem(p: &Path) -> Result<String> {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| invalid(format!("no file name in {}", p.display())))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn gradcheck(a: &GradcheckArgs, threads: usize) -> Result<bool> {
    let scopes = if a.scope == "all" {
        GradcheckScope::ALL.to_vec()
    } else {
        vec![GradcheckScope::parse(&a.scope)?]
    };
    let mut cases: Vec<GradcheckCase> = Vec::new();
    for s in scopes {
        cases.extend(run_gradcheck_suite(s, a.inject_nan.as_deref())?);
    }
    if let Some(name) = &a.inject_nan {
        if !cases.iter().any(|c| &c.name == name) {
            return Err(invalid(format!("no gradcheck case named {name:?}")));
        }
    }
    println!("{:<44} {:>12} {:>8} {:>7}  worst", "case", "max_rel_err", "skipped", "result");
    for c in &cases {
        let err = c.max_rel_error.map_or_else(|| "-".into(), |e| format!("{e:.3e}"));
        let detail = c.error.clone().or_else(|| c.worst.clone()).unwrap_or_default();
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!("{:<44} {:>12} {:>8} {:>7}  {detail}", c.name, err, c.skipped, verdict);
    }
    let ok = cases.iter().all(GradcheckCase::passed);
    println!("{} of {} cases passed", cases.iter().filter(|c| c.passed()).count(), cases.len());
    if let Some(out) = &a.out {
        let mut dir = OutDir::create(out)?;
        dir.write_json("gradcheck.json", &cases)?;
        dir.finish("gradcheck", threads, a)?;
    }
    Ok(ok)
}

#[derive(Serialize)]
struct RfSummary {
    design: String,
    target: String,
    input: [usize; 4],
    probe: [usize; 3],
    expected_window: (usize, usize),
    support: usize,
    /// Inclusive `(top, left, bottom, right)`.
    bounding_box: Option<(usize, usize, usize, usize)>,
    full_rect: bool,
}

fn rfmap(a: &RfmapArgs, threads: usize) -> Result<bool> {
    let design = if a.design == "5x5-only" {
        ModuleDesign::SingleSquare { side: 5 }
    } else {
        ModuleDesign::parse(&a.design)?
    };
    let attention = match a.target.as_str() {
        "attention" => true,
        "module" => false,
        other => return Err(invalid(format!("unknown target {other:?}; expected attention or module"))),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let module = StripModuleParams::with_design(a.channels, a.k, design, 0.5, &mut rng)?;
    let window = module.receptive_field();
    let size = a.size.unwrap_or(window.0.max(window.1) + 8);
    let (cy, cx) = (size / 2, size / 2);
    let probe = Probe {
        channel: a.probe_channel,
        y: cy,
        x: cx,
    };
    let dims = [1, a.channels, size, size];
    let mask = if attention {
        receptive_field_map(&module, dims, probe, window, a.seed, |m, t, x| {
            m.attention(t, x, StripOrder::default())
        })?
    } else {
        receptive_field_map(&module, dims, probe, window, a.seed, |m, t, x| {
            m.forward(t, x, StripOrder::default())
        })?
    };
    let bbox = mask.bounding_box();
    let summary = RfSummary {
        design: design.name(),
        target: a.target.clone(),
        input: dims,
        probe: [probe.channel, probe.y, probe.x],
        expected_window: window,
        support: mask.count(),
        bounding_box: bbox,
        full_rect: bbox.is_some_and(|(t, l, b, r)| mask.is_full_rect(b - t + 1, r - l + 1)),
    };
    match bbox {
        Some((t, l, b, r)) => println!(
            "{} {}: support {} cells, bounding box {}x{} at rows {t}..={b}, cols {l}..={r}{}",
            summary.design,
            summary.target,
            summary.support,
            b - t + 1,
            r - l + 1,
            if summary.full_rect { " (solid)" } else { "" }
        ),
        None => println!("{} {}: empty support", summary.design, summary.target),
    }
    let mut dir = OutDir::create(&a.out)?;
    dir.write("mask.pgm", &mask.to_pgm())?;
    dir.write("mask.csv", mask.to_csv().as_bytes())?;
    dir.write_json("rfmap.json", &summary)?;
    let resolved = RfmapArgs {
        size: Some(size),
        design: a.design.clone(),
        target: a.target.clone(),
        out: a.out.clone(),
        ..*a
    };
    dir.finish("rfmap", threads, &resolved)?;
    Ok(true)
}

#[derive(Serialize)]
struct CostRow {
    variant: String,
    kernels: [usize; 4],
    params: u64,
    macs: Option<u64>,
    input: Option<usize>,
    reference: Option<f64>,
    deviation: Option<f64>,
    within_tolerance: Option<bool>,
}

fn costs(a: &CostArgs, threads: usize, flops: bool) -> Result<bool> {
    let mut v = VariantConfig::preset(&a.variant)?;
    let default_kernels = v.kernel_schedule;
    if let Some(k) = &a.kernels {
        let k: Vec<usize> = parse_list(k, "kernel")?;
        let k: [usize; 4] = k
            .try_into()
            .map_err(|_| invalid("--kernels needs four comma-separated values"))?;
        v = v.with_kernels(k);
    }
    let params = count_parameters(&v)?;
    let macs = if flops { Some(estimate_flops(&v, a.size, a.size)?) } else { None };
    let comparable = v.kernel_schedule == default_kernels && (!flops || a.size == 1024);
    let reference = reference_cost(&v.name)
        .filter(|_| comparable)
        .map(|r| if flops { r.flops } else { r.params });
    let measured = macs.unwrap_or(params) as f64;
    let deviation = reference.map(|r| (measured - r) / r);
    let tol = if flops { FLOPS_TOLERANCE } else { PARAM_TOLERANCE };
    let row = CostRow {
        variant: v.name.clone(),
        kernels: v.kernel_schedule,
        params,
        macs,
        input: flops.then_some(a.size),
        reference,
        deviation,
        within_tolerance: deviation.map(|d| d.abs() <= tol),
    };
    if flops {
        print!("{} at {}x{}: {:.3} GFLOPs (multiply-accumulates)", row.variant, a.size, a.size, measured / 1e9);
    } else {
        print!("{} kernels {:?}: {} parameters ({:.3}M)", row.variant, row.kernels, params, measured / 1e6);
    }
    match (reference, deviation) {
        (Some(r), Some(d)) => {
            let unit = if flops { r / 1e9 } else { r / 1e6 };
            println!(
                ", reference {unit}{}, deviation {:+.2}% ({} ±{:.0}%)",
                if flops { "G" } else { "M" },
                d * 100.0,
                if d.abs() <= tol { "within" } else { "outside" },
                tol * 100.0
            );
        }
        _ => println!(),
    }
    let layers = if a.detail { layer_costs(&v, a.size, a.size)? } else { Vec::new() };
    for l in &layers {
        println!("  {:<40} {:>10} {:>14}", l.name, l.params, l.macs);
    }
    if let Some(out) = &a.out {
        let mut dir = OutDir::create(out)?;
        let name = if flops { "flops.json" } else { "params.json" };
        dir.write_json(name, &row)?;
        if a.detail {
            let mut csv = String::from("layer,params,macs\n");
            for l in &layers {
                csv.push_str(&format!("{},{},{}\n", l.name, l.params, l.macs));
            }
            dir.write("layers.csv", csv.as_bytes())?;
        }
        dir.finish(if flops { "flops" } else { "params" }, threads, a)?;
    }
    Ok(true)
}

fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    if path.is_file() && path.extension().is_some_and(|e| e == "json") {
        let text = read_text(path)?;
        return serde_json::from_str(&text)
            .map_err(|e| invalid(format!("{}: {e}", path.display())));
    }
    let mut out = Vec::new();
    for f in input_files(path, "txt")? {
        let id = stem(&f)?;
        let records = parse_dota_annotations(&read_text(&f)?, &id)
            .with_context(|| format!("in {}", f.display()))?;
        out.extend(records);
    }
    Ok(out)
}

fn ingest(a: &IngestArgs, threads: usize) -> Result<bool> {
    let files = input_files(&a.annotations, "txt")?;
    let mut dir = OutDir::create(&a.out)?;
    let mut all = Vec::new();
    for f in &files {
        let id = stem(f)?;
        let records = parse_dota_annotations(&read_text(f)?, &id).with_context(|| format!("in {}", f.display()))?;
        dir.write(&format!("labels/{id}.txt"), format_dota_annotations(&records).as_bytes())?;
        all.extend(records);
    }
    let mut images = 0;
    if let Some(img_dir) = &a.images {
        require_exists(img_dir)?;
        let mut paths: Vec<PathBuf> = Vec::new();
        for ext in ["pgm", "ppm", "pnm"] {
            paths.extend(input_files(img_dir, ext)?);
        }
        paths.sort();
        for p in paths {
            let t = read_image(&p).with_context(|| format!("decoding {}", p.display()))?;
            let mut bytes = Vec::new();
            t.write_to(&mut bytes)?;
            dir.write(&format!("images/{}.stnt", stem(&p)?), &bytes)?;
            images += 1;
        }
    }
    dir.write_json("ground_truth.json", &all)?;
    println!("{} annotation files, {} objects, {images} images", files.len(), all.len());
    dir.finish("ingest", threads, a)?;
    Ok(true)
}

#[derive(Serialize)]
struct TileEntry {
    name: String,
    scale: f64,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    objects: usize,
}

fn tile(a: &TileArgs, threads: usize) -> Result<bool> {
    let scales: Vec<f64> = if a.multi_scale {
        MULTI_SCALES.to_vec()
    } else {
        parse_list(&a.scales, "scale")?
    };
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("scales must be positive"));
    }
    let overlap = a
        .overlap
        .unwrap_or(if a.multi_scale { MULTI_SCALE_OVERLAP } else { DEFAULT_OVERLAP });
    let clip = ClipMode::parse(&a.clip)?;
    let (image, dims, default_name) = match (&a.image, &a.dims) {
        (Some(p), _) => {
            require_exists(p)?;
            let t = read_image(p).with_context(|| format!("decoding {}", p.display()))?;
            let [_, _, h, w] = t.dims();
            (Some(t), (w, h), stem(p)?)
        }
        (None, Some(d)) => {
            let (w, h) = d
                .split_once('x')
                .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                .ok_or_else(|| invalid(format!("--dims {d:?} is not WxH")))?;
            let name = match &a.annotations {
                Some(p) => stem(p)?,
                None => "image".to_string(),
            };
            (None, (w, h), name)
        }
        (None, None) => return Err(invalid("give --image or --dims")),
    };
    let name = a.name.clone().unwrap_or(default_name);
    let gts = match &a.annotations {
        Some(p) => {
            require_exists(p)?;
            parse_dota_annotations(&read_text(p)?, &name).with_context(|| format!("in {}", p.display()))?
        }
        None => Vec::new(),
    };
    let mut dir = OutDir::create(&a.out)?;
    let mut entries = Vec::new();
    for &s in &scales {
        let (sw, sh) = ((dims.0 as f64 * s).round() as usize, (dims.1 as f64 * s).round() as usize);
        if sw == 0 || sh == 0 {
            return Err(invalid(format!("scale {s} collapses the image")));
        }
        let scaled = match &image {
            Some(t) if s != 1.0 => Some(resize_bilinear(t, s)?),
            Some(t) => Some(t.clone()),
            None => None,
        };
        let scaled_gts: Vec<GroundTruthRecord> = gts
            .iter()
            .map(|g| GroundTruthRecord {
                rbox: stripdet_core::dota::scale_box(&g.rbox, s),
                ..g.clone()
            })
            .collect();
        for (x, y) in tile_image(sw, sh, a.patch, overlap)? {
            let (tw, th) = (a.patch.min(sw - x), a.patch.min(sh - y));
            let tname = tile_name(&name, s, x, y);
            let tile_gts = tile_ground_truth(&scaled_gts, (x, y), tw, th, clip, &tname);
            dir.write(&format!("labels/{tname}.txt"), format_dota_annotations(&tile_gts).as_bytes())?;
            if let Some(img) = &scaled {
                let mut bytes = Vec::new();
                crop(img, x, y, tw, th)?.write_to(&mut bytes)?;
                dir.write(&format!("images/{tname}.stnt"), &bytes)?;
            }
            entries.push(TileEntry {
                name: tname,
                scale: s,
                x,
                y,
                width: tw,
                height: th,
                objects: tile_gts.len(),
            });
        }
    }
    for e in &entries {
        println!("{} {}x{} objects {}", e.name, e.width, e.height, e.objects);
    }
    dir.write_json("tiles.json", &entries)?;
    dir.finish("tile", threads, a)?;
    Ok(true)
}

fn merge(a: &MergeArgs, threads: usize) -> Result<bool> {
    if !(0.0..=1.0).contains(&a.nms_thr) {
        return Err(invalid("--nms-thr must be in [0, 1]"));
    }
    let mut by_image: BTreeMap<String, Vec<TileDetections>> = BTreeMap::new();
    for f in input_files(&a.input, "txt")? {
        let (image, scale, x, y) = parse_tile_name(&stem(&f)?)?;
        let detections = parse_detections(&read_text(&f)?).with_context(|| format!("in {}", f.display()))?;
        by_image.entry(image).or_default().push(TileDetections {
            origin: (x, y),
            scale,
            detections,
        });
    }
    let mut dir = OutDir::create(&a.out)?;
    let mut counts = BTreeMap::new();
    for (image, tiles) in &by_image {
        let merged = merge_tile_detections(tiles, a.nms_thr)?;
        let before: usize = tiles.iter().map(|t| t.detections.len()).sum();
        println!("{image}: {} tiles, {before} detections -> {}", tiles.len(), merged.len());
        counts.insert(image.clone(), merged.len());
        dir.write(&format!("{image}.txt"), format_detections(&merged).as_bytes())?;
    }
    dir.write_json("merged.json", &counts)?;
    dir.finish("merge", threads, a)?;
    Ok(true)
}

fn eval(a: &EvalArgs, threads: usize) -> Result<bool> {
    let metric = ApMetric::parse(&a.metric)?;
    let bins = ArBins::parse(&a.bins)?;
    if !(a.iou_thr > 0.0 && a.iou_thr <= 1.0) {
        return Err(invalid("--iou-thr must be in (0, 1]"));
    }
    let gts = load_ground_truth(&a.gts)?;
    let mut dets = Vec::new();
    for f in input_files(&a.dets, "txt")? {
        let id = stem(&f)?;
        for d in parse_detections(&read_text(&f)?).with_context(|| format!("in {}", f.display()))? {
            dets.push(DetectionRecord {
                image_id: id.clone(),
                class: d.class,
                rbox: d.rbox,
                score: d.score,
            });
        }
    }
    let report = evaluate(&dets, &gts, &bins, a.iou_thr, metric)?;
    let table = format_report_table(&report);
    print!("{table}");
    let mut dir = OutDir::create(&a.out)?;
    dir.write_json("report.json", &report)?;
    dir.write("report.txt", table.as_bytes())?;
    dir.finish("eval", threads, a)?;
    Ok(true)
}

fn experiment(a: &ExperimentArgs, threads: usize) -> Result<bool> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_exists(p)?;
            serde_json::from_str::<ExperimentConfig>(&read_text(p)?)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if a.control {
        cfg.control = true;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = parse_list(s, "seed")?;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    let report = compare_square_vs_strip(&cfg)?;
    let table = report.to_table();
    print!("{table}");
    let mut dir = OutDir::create(&a.out)?;
    dir.write_json("report.json", &report)?;
    dir.write("report.txt", table.as_bytes())?;
    dir.write("report.csv", report.to_csv().as_bytes())?;
    dir.finish("experiment", threads, &cfg)?;
    Ok(true)
}

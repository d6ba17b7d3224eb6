//! Command-line interface: `solve`, `segment`, `localize`, `synth`, `eval`.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::body_model::procedural::humanoid;
use crate::io;
use crate::math::UpAxis;
use crate::metrics;
use crate::segmentation::{cluster_markers, distance_std_affinity, MarkerSequence};
use crate::solver::{self, forward_all, SolverConfig};
use crate::synth::{self, NoiseSpec, Scenario, YawSpec};
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mocapfit",
    version,
    about = "Solve body pose and shape from unlabeled optical markers"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full solving pipeline on a marker sequence
    Solve(SolveArgs),
    /// Group markers into rigid clusters and report the segmentation
    Segment(SegmentArgs),
    /// Find the best-matching kinematic chain for the markers
    Localize(LocalizeArgs),
    /// Generate synthetic markers, prior, and ground truth for a scenario
    Synth(SynthArgs),
    /// Compare a solve result against reference parameters
    Eval(EvalArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// World vertical axis used for the yaw hypotheses
    #[arg(long, value_parser = parse_up_axis)]
    up_axis: Option<UpAxis>,
    /// Marker rate after decimation
    #[arg(long, default_value_t = 30.0)]
    target_rate: f64,
    /// Reserved for stochastic extensions; the solver itself is deterministic
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Merge threshold, meters
    #[arg(long, default_value_t = crate::segmentation::DEFAULT_CLUSTER_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 30.0)]
    target_rate: f64,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    markers: PathBuf,
    #[arg(long)]
    prior: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    target_rate: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// walk | squat | arm_raise | static
    #[arg(long)]
    scenario: String,
    /// Number of markers to place
    #[arg(long, default_value_t = 50)]
    markers: usize,
    #[arg(long, default_value_t = 150)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Restrict the layout to a named part from the model's part table
    #[arg(long)]
    part: Option<String>,
    /// Per-frame probability that a visible marker starts a hidden interval
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 10)]
    dropout_duration: usize,
    /// Pose noise applied to the prior, degrees
    #[arg(long, default_value_t = 5.0)]
    sigma_theta_deg: f64,
    /// Shape noise applied to the prior
    #[arg(long, default_value_t = 0.2)]
    sigma_beta: f64,
    /// Fixed prior yaw offset, degrees; omitted means a random draw from the
    /// default hypothesis set
    #[arg(long)]
    yaw_deg: Option<f64>,
    /// Keep the ground-truth translation in the prior instead of zeroing it
    #[arg(long)]
    keep_translation: bool,
    /// Prior tracking gap as START:END (half-open frames); repeatable
    #[arg(long = "gap")]
    gaps: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Solve result file
    #[arg(long)]
    pred: PathBuf,
    /// Reference parameters (prior-format file, fully present)
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Marker file for the marker-to-surface metric
    #[arg(long)]
    markers: Option<PathBuf>,
    /// Also write the metrics as JSON
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 30.0)]
    target_rate: f64,
}

fn parse_up_axis(s: &str) -> std::result::Result<UpAxis, String> {
    match s {
        "y" | "Y" => Ok(UpAxis::Y),
        "z" | "Z" => Ok(UpAxis::Z),
        other => Err(format!("unknown up axis '{other}' (y|z)")),
    }
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Segment(args) => cmd_segment(args),
        Command::Localize(args) => cmd_localize(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_markers(path: &PathBuf, target_rate: f64) -> Result<MarkerSequence> {
    let file = io::read_marker_file(path)?;
    io::ingest_markers(&file, target_rate)
}

fn load_config(path: &Option<PathBuf>) -> Result<SolverConfig> {
    match path {
        Some(p) => io::read_config_file(p),
        None => Ok(SolverConfig::default()),
    }
}

fn cmd_solve(args: SolveArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(axis) = args.up_axis {
        config.up_axis = axis;
    }
    let model = io::read_model_file(&args.model)?;
    let markers = load_markers(&args.markers, args.target_rate)?;
    let prior_file = io::read_prior_file(&args.prior)?;
    let prior = io::ingest_prior(&prior_file, markers.frame_count())?;

    let result = solver::solve(&markers, &prior, &model, &config)?;
    io::write_result_file(
        &args.out,
        &io::ResultFile::from_result(&result, markers.frame_rate()),
    )?;

    let d = &result.diagnostics;
    println!("status: {:?}", result.status);
    println!(
        "segmentation: {} clusters -> chain length {}{}",
        d.localization.cluster_count,
        d.localization.chain_length,
        if d.localization.fallback_used { " (fallback)" } else { "" }
    );
    println!(
        "localized chain: {} (E3D {:.3e})",
        d.localization.chain_bone_names.join(" > "),
        d.localization.e3d
    );
    println!("yaw     stage2 iters  stage2 E3D    stage4 iters  stage4 E3D    selection");
    for (i, h) in d.hypotheses.iter().enumerate() {
        println!(
            "{:>5.0}.  {:>12}  {:<12.3e}  {:>12}  {:<12.3e}  {:.3e}{}",
            h.yaw_deg,
            h.stage2.iterations,
            h.stage2.e3d,
            h.stage4.iterations,
            h.stage4.e3d,
            h.selection_e3d,
            if i == d.chosen_index { "  <- chosen" } else { "" }
        );
    }
    for (i, s5) in d.stage5.iter().enumerate() {
        println!(
            "refine {}: {} iters, E3D {:.3e}",
            i + 1,
            s5.iterations,
            s5.e3d
        );
    }
    println!("result written to {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct SegmentReport {
    format_version: String,
    marker_ids: Vec<String>,
    labels: Vec<usize>,
    cluster_count: usize,
    affinity_summary: AffinitySummary,
}

#[derive(Serialize)]
struct AffinitySummary {
    min: f64,
    max: f64,
    mean: f64,
    infinite_pairs: usize,
}

fn cmd_segment(args: SegmentArgs) -> Result<()> {
    let markers = load_markers(&args.markers, args.target_rate)?;
    let affinity = distance_std_affinity(&markers);
    let clusters = cluster_markers(&affinity, args.threshold)?;
    let m = markers.marker_count();
    let mut finite: Vec<f64> = Vec::new();
    let mut infinite_pairs = 0usize;
    for i in 0..m {
        for j in (i + 1)..m {
            if affinity[i][j].is_finite() {
                finite.push(affinity[i][j]);
            } else {
                infinite_pairs += 1;
            }
        }
    }
    let summary = AffinitySummary {
        min: finite.iter().copied().fold(f64::INFINITY, f64::min),
        max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: if finite.is_empty() {
            f64::NAN
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        infinite_pairs,
    };
    let report = SegmentReport {
        format_version: io::FORMAT_VERSION.to_string(),
        marker_ids: markers.marker_ids().to_vec(),
        labels: clusters.labels.clone(),
        cluster_count: clusters.cluster_count,
        affinity_summary: summary,
    };
    crate::io::write_json_value(&args.out, &report)?;
    println!(
        "{} markers -> {} clusters (report: {})",
        m,
        clusters.cluster_count,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct LocalizeReport {
    format_version: String,
    cluster_count: usize,
    chain_length: usize,
    fallback_used: bool,
    winning_chain: Vec<String>,
    energy: f64,
    chamfer_energy: f64,
    shape_energy: f64,
    candidates: Vec<crate::part_localization::CandidateEnergy>,
}

fn cmd_localize(args: LocalizeArgs) -> Result<()> {
    let config = load_config(&args.config)?;
    let model = io::read_model_file(&args.model)?;
    let markers = load_markers(&args.markers, args.target_rate)?;
    let prior_file = io::read_prior_file(&args.prior)?;
    let prior = io::ingest_prior(&prior_file, markers.frame_count())?;

    let affinity = distance_std_affinity(&markers);
    let clusters = cluster_markers(&affinity, config.cluster_threshold)?;
    let outcome = crate::part_localization::localize_part(
        &markers,
        &clusters,
        &model,
        &prior.params,
        &config.localization,
    )?;
    let report = LocalizeReport {
        format_version: io::FORMAT_VERSION.to_string(),
        cluster_count: outcome.cluster_count,
        chain_length: outcome.chain_length,
        fallback_used: outcome.fallback_used,
        winning_chain: outcome
            .best
            .chain
            .bones
            .iter()
            .map(|&b| model.bone_names[b].clone())
            .collect(),
        energy: outcome.best.energy,
        chamfer_energy: outcome.best.chamfer_energy,
        shape_energy: outcome.best.shape_energy,
        candidates: outcome.candidates,
    };
    crate::io::write_json_value(&args.out, &report)?;
    println!(
        "winning chain: {} (energy {:.4e}, {} candidates)",
        report.winning_chain.join(" > "),
        report.energy,
        report.candidates.len()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let scenario: Scenario = args.scenario.parse()?;
    let model = humanoid();
    std::fs::create_dir_all(&args.out_dir)?;

    let gt = synth::scenario_motion(scenario, &model, args.frames, args.rate, args.seed);
    let layout = match &args.part {
        Some(part) => {
            let bones = model
                .part_table
                .get(part)
                .ok_or_else(|| Error::InvalidParams(format!("unknown part '{part}'")))?
                .iter()
                .map(|name| model.bone_index(name).expect("validated at load"))
                .collect::<Vec<_>>();
            let faces = synth::part_faces(&model, &bones);
            synth::sample_layout_on(&model, &faces, args.markers, args.seed)?
        }
        None => synth::sample_layout(&model, args.markers, args.seed)?,
    };
    let mut markers = synth::animate_markers(&model, &gt, &layout, args.rate)?;
    if args.dropout > 0.0 {
        markers = synth::dropout(&markers, args.dropout, args.dropout_duration, args.seed)?;
    }

    let mut gap_intervals = Vec::new();
    for gap in &args.gaps {
        let (a, b) = gap
            .split_once(':')
            .ok_or_else(|| Error::InvalidParams(format!("gap '{gap}' is not START:END")))?;
        let a: usize = a.parse().map_err(|_| Error::InvalidParams(format!("bad gap start '{a}'")))?;
        let b: usize = b.parse().map_err(|_| Error::InvalidParams(format!("bad gap end '{b}'")))?;
        gap_intervals.push((a, b));
    }
    let noise = NoiseSpec {
        sigma_theta: args.sigma_theta_deg.to_radians(),
        sigma_beta: args.sigma_beta,
        yaw: match args.yaw_deg {
            Some(deg) => YawSpec::Fixed(deg.to_radians()),
            None => NoiseSpec::default().yaw,
        },
        invalidate_translation: !args.keep_translation,
        gap_intervals,
        up_axis: UpAxis::Y,
    };
    let prior = synth::perturb_prior(&gt, &noise, args.seed);

    io::write_model_file(&args.out_dir.join("model.json"), &model)?;
    io::write_marker_file(&args.out_dir.join("markers.json"), &markers)?;
    io::write_prior_file(
        &args.out_dir.join("gt.json"),
        &io::PriorFile::from_params(&gt, &vec![true; args.frames], args.rate),
    )?;
    io::write_prior_file(
        &args.out_dir.join("prior.json"),
        &io::PriorFile::from_params(&prior.params, &prior.present, args.rate),
    )?;
    println!(
        "wrote model.json, markers.json, gt.json, prior.json to {} (prior yaw offset {:.1} deg)",
        args.out_dir.display(),
        prior.applied_yaw.to_degrees()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    m2s_mm: Option<f64>,
    mpjpe_mm: f64,
    mpjve_mm_per_s: f64,
    v2v_mm: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = io::read_model_file(&args.model)?;
    let pred_file = io::read_result_file(&args.pred)?;
    let pred = pred_file.params.to_params();
    let ref_file = io::read_prior_file(&args.reference)?;
    let reference = io::ingest_prior(&ref_file, pred.frame_count())?;

    let (pred_joints, pred_vertices) = forward_all(&model, &pred)?;
    let (ref_joints, ref_vertices) = forward_all(&model, &reference.params)?;

    let mpjpe = metrics::mpjpe(&pred_joints, &ref_joints)?;
    let mpjve = metrics::mpjve(&pred_joints, &ref_joints, pred_file.frame_rate)?;
    let v2v = metrics::v2v(&pred_vertices, &ref_vertices)?;
    let m2s = match &args.markers {
        Some(path) => {
            let markers = load_markers(path, args.target_rate)?;
            Some(metrics::m2s(&markers, &pred_vertices, &model.faces)?)
        }
        None => None,
    };

    println!("metric   value");
    match m2s {
        Some(v) => println!("m2s      {v:.2} mm"),
        None => println!("m2s      n/a (no --markers)"),
    }
    println!("MPJPE    {mpjpe:.2} mm");
    println!("MPJVE    {mpjve:.2} mm/s");
    println!("V2V      {v2v:.2} mm");

    if let Some(path) = &args.json {
        crate::io::write_json_value(
            path,
            &EvalReport {
                m2s_mm: m2s,
                mpjpe_mm: mpjpe,
                mpjve_mm_per_s: mpjve,
                v2v_mm: v2v,
            },
        )?;
    }
    Ok(())
}

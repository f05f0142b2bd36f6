use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lipsynth::config::{FrontendConfig, ModelConfig, TrainConfig};
use lipsynth::corr::{self, analyze_corpus};
use lipsynth::data::{self, load_video, video_dirs};
use lipsynth::flow::LucasKanade;
use lipsynth::metrics::MetricReport;
use lipsynth::perceptual::{save_perceptual, train_perceptual, PerceptualTrainOptions};
use lipsynth::signal::{compute_lms, resample};
use lipsynth::synth::{SynthSpec, FPS};
use lipsynth::train::{
    disc_pair_accuracy, evaluate_generator, load_clips, run_training, Models,
};
use lipsynth::vision::normalize;
use lipsynth::{io, Error};
use lipsynth_grad::{Exec, Tensor};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "lipsynth",
    version,
    about = "Speech-driven lip movement synthesis on a desk-scale corpus"
)]
struct Cli {
    /// Force single-threaded execution.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic talking-ellipse corpus.
    Synth(SynthArgs),
    /// Slice corpus videos into aligned 16-frame training clips.
    Preprocess(PreprocessArgs),
    /// Train the frame autoencoder that backs the perceptual loss.
    TrainPerceptual(TrainPerceptualArgs),
    /// Adversarially train the generator on preprocessed clips.
    Train(TrainArgs),
    /// Synthesize lip frames for one speech window and identity image.
    Generate(GenerateArgs),
    /// Score a trained generator on held-out clips.
    Evaluate(EvaluateArgs),
    /// Correlate audio and video derivatives across temporal offsets.
    AnalyzeDelay(AnalyzeDelayArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of videos.
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Frames per video.
    #[arg(long, default_value_t = 25)]
    frames: usize,
    /// Fixed audio-to-video delay in frames; omit for a random draw per video.
    #[arg(long)]
    delay: Option<usize>,
    /// Seed for envelopes, identities, and noise.
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Observation noise level in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output clips directory.
    #[arg(long)]
    out: PathBuf,
    /// Window start stride in frames.
    #[arg(long, default_value_t = 4)]
    stride: usize,
}

#[derive(Args)]
struct TrainPerceptualArgs {
    /// Clips directory produced by `preprocess`.
    #[arg(long)]
    clips: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Model preset providing the autoencoder widths.
    #[arg(long, default_value = "desk")]
    model: String,
    #[arg(long, default_value_t = 400)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Clips directory produced by `preprocess`.
    #[arg(long)]
    clips: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Discriminator learning rate (defaults to --lr).
    #[arg(long)]
    disc_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Ablation preset letter (a-i).
    #[arg(long)]
    ablation: Option<String>,
    /// Model preset (paper, desk, smoke, tiny).
    #[arg(long)]
    model: Option<String>,
    /// Perceptual checkpoint from `train-perceptual`.
    #[arg(long)]
    perceptual: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trainer checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Speech WAV (any sample rate, mono); the first 0.64 s window is used.
    #[arg(long)]
    audio: PathBuf,
    /// 64x64 identity image of the lip region.
    #[arg(long)]
    identity: PathBuf,
    /// Output directory for frames and the latency report.
    #[arg(long)]
    out: PathBuf,
    /// Also write an animated GIF.
    #[arg(long)]
    gif: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trainer checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Held-out clips directory.
    #[arg(long)]
    clips: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    /// Row label in the emitted table.
    #[arg(long, default_value = "run")]
    label: String,
}

#[derive(Args)]
struct AnalyzeDelayArgs {
    /// Corpus directory produced by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for curves and histogram.
    #[arg(long)]
    out: PathBuf,
    /// Largest audio-lead offset to test, in frames.
    #[arg(long, default_value_t = 7)]
    max_offset: usize,
    /// Also render the histogram as an SVG bar chart.
    #[arg(long)]
    svg: bool,
}

#[derive(Serialize)]
struct LatencyReport {
    load_ms: f64,
    frontend_ms: f64,
    generate_ms: f64,
    total_ms: f64,
    realtime: bool,
}

fn main() {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Seq } else { lipsynth::exec_from_env() };
    if let Err(e) = run(cli.cmd, exec) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd, exec: Exec) -> lipsynth::Result<()> {
    match cmd {
        Cmd::Synth(a) => synth_cmd(a),
        Cmd::Preprocess(a) => preprocess_cmd(a),
        Cmd::TrainPerceptual(a) => train_perceptual_cmd(a, exec),
        Cmd::Train(a) => train_cmd(a, exec),
        Cmd::Generate(a) => generate_cmd(a, exec),
        Cmd::Evaluate(a) => evaluate_cmd(a, exec),
        Cmd::AnalyzeDelay(a) => analyze_delay_cmd(a, exec),
    }
}

fn synth_cmd(a: SynthArgs) -> lipsynth::Result<()> {
    let spec = SynthSpec {
        n_videos: a.count,
        video_len: a.frames,
        delay: a.delay,
        envelope_seed: a.seed,
        noise_level: a.noise,
    };
    spec.validate()?;
    lipsynth::synth::write_corpus(&spec, &a.out)?;
    println!(
        "wrote {} videos x {} frames to {}",
        a.count,
        a.frames,
        a.out.display()
    );
    Ok(())
}

fn preprocess_cmd(a: PreprocessArgs) -> lipsynth::Result<()> {
    if a.stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let cfg = FrontendConfig::default();
    let dirs = video_dirs(&a.corpus)?;
    let mut n_clips = 0usize;
    for dir in &dirs {
        let video = load_video(dir)?;
        let frames = video.frames.shape()[0];
        let window = (cfg.window_seconds * video.meta.fps).round() as usize;
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut start = 0;
        while start + window <= frames {
            let clip = data::extract_window(&video, start, &cfg)?;
            data::write_clip(a.out.join(format!("{name}_s{start:03}")), &clip)?;
            n_clips += 1;
            start += a.stride;
        }
    }
    println!(
        "wrote {n_clips} clips from {} videos to {}",
        dirs.len(),
        a.out.display()
    );
    Ok(())
}

fn train_perceptual_cmd(a: TrainPerceptualArgs, exec: Exec) -> lipsynth::Result<()> {
    let clips = load_clips(&a.clips)?;
    let model = ModelConfig::preset(&a.model)?;
    let opt = PerceptualTrainOptions {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (vs, log) = train_perceptual(&clips, &model.ae, &opt, exec)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_perceptual(&a.out, &vs, &model.ae)?;
    let (first, last) = (log.first().unwrap(), log.last().unwrap());
    println!(
        "trained autoencoder on {} clips for {} steps: loss {:.6} -> {:.6}",
        clips.len(),
        a.steps,
        first.1,
        last.1
    );
    println!("saved {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, exec: Exec) -> lipsynth::Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(path) => lipsynth::config::load_toml(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.ablation {
        cfg.ablation = v;
    }
    if let Some(v) = a.model {
        cfg.model = v;
    }
    if let Some(v) = a.perceptual {
        cfg.perceptual_ckpt = Some(v);
    }
    let out = run_training(&cfg, &a.clips, &a.out, exec)?;
    let l = out.last;
    println!(
        "finished {} steps: total {:.6} (corr {}, pixel {}, perceptual {}, adversarial {}, disc {})",
        out.steps_run,
        l.total,
        fmt_opt(l.corr),
        fmt_opt(l.pixel),
        fmt_opt(l.perceptual),
        fmt_opt(l.adversarial),
        fmt_opt(l.disc),
    );
    println!("checkpoint: {}", out.final_ckpt.display());
    println!("loss log:   {}", out.log_path.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
}

fn generate_cmd(a: GenerateArgs, exec: Exec) -> lipsynth::Result<()> {
    let t0 = Instant::now();
    let models = Models::load(&a.ckpt)?;
    let cfg = models.cfg.frontend.clone();
    let load_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let (samples, sr) = io::read_wav(&a.audio)?;
    let samples = resample(&samples, sr, cfg.sample_rate);
    if samples.len() < cfg.window_samples() {
        return Err(Error::invalid(format!(
            "audio too short: got {} samples at {} Hz, need {} ({} s)",
            samples.len(),
            cfg.sample_rate,
            cfg.window_samples(),
            cfg.window_seconds
        )));
    }
    let lms = compute_lms(&samples[..cfg.window_samples()], &cfg)?;
    let identity01 = io::read_png(&a.identity)?;
    let ishape = identity01.shape().to_vec();
    if ishape != [3, 64, 64] {
        return Err(Error::invalid(format!(
            "identity image must be 64x64 RGB, got {}x{}",
            ishape[2], ishape[1]
        )));
    }
    let identity = normalize(&identity01);
    let frontend_ms = t1.elapsed().as_secs_f64() * 1e3;

    let t2 = Instant::now();
    let lms_b = Tensor::new(&[1, 1, 64, 128], lms.data().to_vec());
    let id_b = Tensor::new(&[1, 3, 64, 64], identity.data().to_vec());
    let video = models.generate(&lms_b, &id_b, exec);
    let generate_ms = t2.elapsed().as_secs_f64() * 1e3;

    std::fs::create_dir_all(&a.out)?;
    let frames01 = lipsynth::vision::denormalize(&data::to_tchw(&video, 0));
    let fsize = 3 * 64 * 64;
    for k in 0..16 {
        let frame = Tensor::new(&[3, 64, 64], frames01.data()[k * fsize..(k + 1) * fsize].to_vec());
        io::write_png(a.out.join(format!("frame_{k:02}.png")), &frame)?;
    }
    if a.gif {
        io::write_gif(a.out.join("clip.gif"), &frames01, FPS)?;
    }
    let total_ms = t0.elapsed().as_secs_f64() * 1e3;
    let report = LatencyReport {
        load_ms,
        frontend_ms,
        generate_ms,
        total_ms,
        realtime: generate_ms < 1000.0,
    };
    io::write_json(a.out.join("latency.json"), &report)?;
    println!(
        "wrote 16 frames to {} (load {:.1} ms, frontend {:.1} ms, generate {:.1} ms)",
        a.out.display(),
        load_ms,
        frontend_ms,
        generate_ms
    );
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, exec: Exec) -> lipsynth::Result<()> {
    let models = Models::load(&a.ckpt)?;
    let clips = load_clips(&a.clips)?;
    let (report, _) = evaluate_generator(&models, &clips, exec)?;
    std::fs::create_dir_all(&a.out)?;
    MetricReport::write_tsv(a.out.join("metrics.tsv"), &[(a.label.clone(), report.clone())])?;
    report.write_json(a.out.join("metrics.json"))?;

    // ablation-table style row: configuration check marks, then metrics
    let row = models.cfg.ablation.table_row();
    let marks: Vec<&str> = row.iter().map(|&b| if b { "y" } else { "-" }).collect();
    let header = "label\tcorr_deriv\tcorr_nonderiv\tadv\tpix\tperc\td_2s\td_3s\td_fdiff\
                  \tlmd\tpsnr\tssim\tsharp_fake\tsharp_real";
    let table = format!(
        "{header}\n{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        a.label,
        marks.join("\t"),
        report.lmd,
        report.psnr,
        report.ssim,
        report.sharp_fake,
        report.sharp_real
    );
    std::fs::write(a.out.join("table_row.tsv"), &table)?;
    print!("{table}");

    if models.disc.is_some() && clips.len() >= 2 {
        let (m, u) = disc_pair_accuracy(&models, &clips, exec, 1)?;
        println!("disc accuracy: matched {:.3}, mismatched {:.3}", m, u);
    }
    Ok(())
}

fn analyze_delay_cmd(a: AnalyzeDelayArgs, exec: Exec) -> lipsynth::Result<()> {
    let cfg = FrontendConfig::default();
    let analysis = analyze_corpus(&a.corpus, a.max_offset, &LucasKanade::default(), &cfg, exec)?;
    std::fs::create_dir_all(&a.out)?;
    corr::write_curves_tsv(&analysis, a.out.join("curves.tsv"))?;
    corr::write_histogram_tsv(&analysis, a.out.join("histogram.tsv"))?;
    if a.svg {
        std::fs::write(a.out.join("histogram.svg"), corr::render_histogram_svg(&analysis))?;
    }
    let scored: Vec<_> = analysis
        .curves
        .iter()
        .filter(|c| c.argmax.is_some() && c.true_delay.is_some())
        .collect();
    let hits = scored
        .iter()
        .filter(|c| c.argmax == c.true_delay)
        .count();
    println!(
        "analyzed {} videos ({} excluded): mode offset {}, argmax hit rate {}/{}",
        analysis.curves.len(),
        analysis.excluded,
        analysis
            .mode_offset()
            .map(|o| o.to_string())
            .unwrap_or_else(|| "-".into()),
        hits,
        scored.len()
    );
    Ok(())
}

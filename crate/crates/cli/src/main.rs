//! `nlc`: encode, decode, train and evaluate the learned-lifting wavelet codec.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use nlc::codec::{decode_image_stream, decode_resolution, encode_image, read_stream_header};
use nlc::dwt::{Grid, Wavelet};
use nlc::eval::{
    bd_rate, energy_compaction, psnr, rd_sweep, read_manifest, sweep_curve, write_sweep_csv, Metric, RateKind,
    SweepCodec, SweepImage, SweepRow,
};
use nlc::image::{quantize_8bit, read_pgm, write_pgm};
use nlc::nets::L2hVariant;
use nlc::pipeline::{Mode, TransformSpec};
use nlc::quant::QuantizerConfig;
use nlc::synth::{oriented_edge_corpus, SynthConfig};
use nlc::training::{base_steps, train, write_trace_csv, TrainConfig};
use nlc::weights::OperatorWeights;

const DEFAULT_SCALES: &str = "1.5,2.5,4,6,10,17,28";

#[derive(Parser, Debug)]
#[command(name = "nlc", version, about = "Wavelet image codec with learned lifting steps")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress an 8-bit PGM into an .nlc container.
    Encode(EncodeArgs),
    /// Reconstruct a PGM from an .nlc container, optionally at a coarser resolution.
    Decode(DecodeArgs),
    /// Train operator weights on the images of a manifest.
    Train(TrainArgs),
    /// Rate-distortion sweep against the plain wavelet codec, with BD-rate summary.
    Eval(EvalArgs),
    /// Subband energies of the cleaned transform relative to the plain one.
    Compaction(CompactionArgs),
    /// Write the cleaned LL band of one level as a PGM.
    Dumpll(DumpllArgs),
    /// Generate the synthetic oriented-edge corpus.
    Synth(SynthArgs),
}

/// Where the codec settings come from.
#[derive(Args, Debug)]
struct CodecArgs {
    /// Operator weight file (.nlw).
    #[arg(short, long)]
    weights: Option<PathBuf>,
    /// Pipeline mode; defaults to the one the weights were trained for.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Wavelet when no weights are given.
    #[arg(long, value_parser = parse_wavelet)]
    wavelet: Option<Wavelet>,
    /// Decomposition levels; fixed by the weights when present.
    #[arg(long)]
    levels: Option<usize>,
    /// Base step size when no weights are given.
    #[arg(long)]
    delta: Option<f64>,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    input: PathBuf,
    #[command(flatten)]
    codec: CodecArgs,
    /// Step-size multiplier applied to every subband.
    #[arg(short = 'q', long = "step-scale", default_value_t = 1.0)]
    step_scale: f64,
    #[arg(short, long)]
    output: PathBuf,
    /// Decode the written file, check it against the encoder and print PSNR.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(short, long)]
    weights: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Stop at the LL band of this level instead of full resolution.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest of training images (`path [label]` per line).
    manifest: PathBuf,
    /// Training configuration (`key = value` lines).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Start from these weights instead of a fresh initialisation.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
    /// Per-epoch loss trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    manifest: PathBuf,
    /// Weight files to compare with the plain codec; repeatable.
    #[arg(short, long)]
    weights: Vec<PathBuf>,
    /// Step-size multipliers of the operating points.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_SCALES)]
    scales: Vec<f64>,
    /// Base step size of the plain codec; defaults to the first weight file's steps.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_parser = parse_wavelet)]
    wavelet: Option<Wavelet>,
    #[arg(long)]
    levels: Option<usize>,
    /// Per-image CSV of every operating point.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompactionArgs {
    /// Images to average over.
    images: Vec<PathBuf>,
    /// Manifest with more images.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(short, long)]
    weights: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args, Debug)]
struct DumpllArgs {
    input: PathBuf,
    #[arg(short, long)]
    weights: Option<PathBuf>,
    /// Decomposition level of the LL band.
    #[arg(short, long)]
    level: usize,
    #[arg(short, long)]
    output: PathBuf,
    /// Map the band's value range onto 0..255.
    #[arg(long)]
    stretch: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0.3, allow_negative_numbers = true)]
    alpha: f64,
    /// Steepness of each edge in 1/pixel.
    #[arg(long, default_value_t = 2.0)]
    sharpness: f64,
    #[arg(long, default_value_t = 96)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Category label written to the manifest.
    #[arg(long, default_value = "synthetic")]
    label: String,
    /// Output directory; receives the PGMs and manifest.txt.
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: nlc::Error| e.to_string())
}

fn parse_wavelet(s: &str) -> Result<Wavelet, String> {
    s.parse().map_err(|e: nlc::Error| e.to_string())
}

fn load_weights(path: Option<&Path>) -> Result<Option<OperatorWeights>> {
    path.map(|p| OperatorWeights::load(p).with_context(|| format!("loading weights {}", p.display())))
        .transpose()
}

fn trained_mode(w: &OperatorWeights) -> Mode {
    match w.meta.variant {
        L2hVariant::Adaptive => Mode::Hybrid,
        L2hVariant::Linear => Mode::H2lPlusLinear,
    }
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

/// Mode, wavelet, levels and quantizer of one codec.
struct Codec {
    weights: Option<OperatorWeights>,
    mode: Mode,
    wavelet: Wavelet,
    levels: usize,
    quant: QuantizerConfig,
}

impl CodecArgs {
    fn resolve(&self) -> Result<Codec> {
        let weights = load_weights(self.weights.as_deref())?;
        let Some(w) = weights else {
            let mode = self.mode.unwrap_or(Mode::Baseline);
            ensure!(!mode.uses_operators(), "mode {mode} needs a weight file (-w)");
            let wavelet = self.wavelet.unwrap_or(Wavelet::LeGall53);
            let levels = self.levels.unwrap_or(3);
            let delta = self.delta.context("coding without weights needs a base step (--delta)")?;
            let quant = base_steps(levels, delta, &TransformSpec::baseline(wavelet));
            return Ok(Codec { weights: None, mode, wavelet, levels, quant });
        };
        let mode = self.mode.unwrap_or_else(|| trained_mode(&w));
        if let Some(v) = self.wavelet {
            ensure!(v == w.meta.wavelet, "weights were trained for {}, not {}", w.meta.wavelet.name(), v.name());
        }
        let levels = w.quant.num_levels();
        if let Some(l) = self.levels {
            ensure!(l == levels, "weights carry quantizers for {levels} levels, {l} requested");
        }
        let quant = match (mode.uses_operators(), self.delta) {
            (true, Some(_)) => bail!("--delta only applies to baseline coding; trained steps come from the weights"),
            (true, None) => w.quant.clone(),
            (false, None) => w.quant.with_unit_gains(),
            (false, Some(d)) => base_steps(levels, d, &TransformSpec::baseline(w.meta.wavelet)),
        };
        Ok(Codec { wavelet: w.meta.wavelet, weights: Some(w), mode, levels, quant })
    }
}

fn encode(a: EncodeArgs) -> Result<()> {
    let c = a.codec.resolve()?;
    eprintln!(
        "nlc encode input={} weights={} mode={} wavelet={} levels={} step_scale={} output={} verify={}",
        a.input.display(),
        show(&a.codec.weights),
        c.mode,
        c.wavelet.name(),
        c.levels,
        a.step_scale,
        a.output.display(),
        a.verify
    );
    ensure!(a.step_scale > 0.0 && a.step_scale.is_finite(), "step scale must be positive");
    let x = read_pgm(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let enc = encode_image(&x, c.levels, c.wavelet, c.mode, c.weights.as_ref(), &c.quant.with_step_scale(a.step_scale))?;
    fs::write(&a.output, &enc.bytes).with_context(|| format!("writing {}", a.output.display()))?;
    let px = (x.width * x.height) as f64;
    println!(
        "{}x{} -> {} bytes, {:.4} bpp estimated, {:.4} bpp actual",
        x.width,
        x.height,
        enc.bytes.len(),
        enc.estimated_bits / px,
        enc.bytes.len() as f64 * 8.0 / px
    );
    if a.verify {
        let dec = decode_image_stream(&fs::read(&a.output)?, c.weights.as_ref())?;
        ensure!(dec == enc.reconstruction, "decoded image differs from the encoder's reconstruction");
        println!("verified, PSNR {:.3} dB", psnr(&x, &quantize_8bit(&dec), 255.0)?);
    }
    Ok(())
}

fn decode(a: DecodeArgs) -> Result<()> {
    eprintln!(
        "nlc decode input={} weights={} resolution={} output={}",
        a.input.display(),
        show(&a.weights),
        a.resolution.map_or_else(|| "full".into(), |d| d.to_string()),
        a.output.display()
    );
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let w = load_weights(a.weights.as_deref())?;
    let img = match a.resolution {
        Some(d) => decode_resolution(&bytes, d, w.as_ref())?,
        None => decode_image_stream(&bytes, w.as_ref())?,
    };
    write_pgm(&a.output, &img).with_context(|| format!("writing {}", a.output.display()))?;
    println!("{}x{} written to {}", img.width, img.height, a.output.display());
    Ok(())
}

fn read_images(manifest: &Path) -> Result<Vec<SweepImage>> {
    let entries = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    entries
        .into_iter()
        .map(|e| {
            let image = read_pgm(&e.path).with_context(|| format!("reading {}", e.path))?;
            let name = Path::new(&e.path).file_name().map_or(e.path.clone(), |n| n.to_string_lossy().into_owned());
            Ok(SweepImage { name, category: e.label, image })
        })
        .collect()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    for kv in &a.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("override {kv:?} is not key=value"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let effective: Vec<String> = cfg.to_string().lines().map(str::to_string).collect();
    eprintln!(
        "nlc train manifest={} init={} output={} trace={} {}",
        a.manifest.display(),
        show(&a.init),
        a.output.display(),
        show(&a.trace),
        effective.join(" ").replace(" = ", "=")
    );
    let images: Vec<Grid<f32>> = read_images(&a.manifest)?.into_iter().map(|i| i.image).collect();
    let init = load_weights(a.init.as_deref())?;
    let out = train(&images, &cfg, init.as_ref())?;
    out.weights.save(&a.output).with_context(|| format!("writing {}", a.output.display()))?;
    if let Some(t) = &a.trace {
        let mut f = fs::File::create(t).with_context(|| format!("creating {}", t.display()))?;
        write_trace_csv(&out, &mut f)?;
    }
    println!(
        "trained on {} images: delta_base {:.6}, lambda1 {:.6}{}, {} parameters",
        images.len(),
        out.delta_base,
        out.lambda1,
        if out.lambda1_estimated { " (estimated)" } else { "" },
        out.weights.parameter_count()
    );
    for r in &out.refreshes {
        println!(
            "refresh after epoch {}: J' {:.6e} -> {:.6e}, bits {:.1} -> {:.1}",
            r.epoch, r.j_before, r.j_after, r.bits_before, r.bits_after
        );
    }
    if let Some(last) = out.trace.last() {
        println!("final epoch {}: J {:.6e}", last.epoch, last.total);
    }
    Ok(())
}

fn unique_label(stem: &str, taken: &[String]) -> String {
    let mut label = stem.to_string();
    let mut n = 2;
    while taken.contains(&label) {
        label = format!("{stem}_{n}");
        n += 1;
    }
    label
}

fn print_bd(rows: &[SweepRow], labels: &[String], scope: &str) -> Result<()> {
    let finite_msssim = rows.iter().all(|r| r.msssim.is_finite());
    for label in labels {
        let mut parts = Vec::new();
        for metric in [Metric::Psnr, Metric::Ssim, Metric::MsSsimDb] {
            if metric == Metric::MsSsimDb && !finite_msssim {
                continue;
            }
            for (kind, tag) in [(RateKind::Actual, "bytes"), (RateKind::Estimated, "model")] {
                let anchor = sweep_curve(rows, "baseline", metric, kind)?;
                let test = sweep_curve(rows, label, metric, kind)?;
                match bd_rate(&anchor, &test) {
                    Ok(v) => parts.push(format!("{}/{tag} {v:+.3}%", metric.name())),
                    Err(e) => parts.push(format!("{}/{tag} n/a ({e})", metric.name())),
                }
            }
        }
        println!("BD-rate {label} vs baseline [{scope}]: {}", parts.join(", "));
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    eprintln!(
        "nlc eval manifest={} weights={:?} scales={:?} delta={} wavelet={} levels={} output={}",
        a.manifest.display(),
        a.weights,
        a.scales,
        a.delta.map_or_else(|| "weights".into(), |d| d.to_string()),
        a.wavelet.map_or("weights", |w| w.name()),
        a.levels.map_or_else(|| "weights".into(), |l| l.to_string()),
        show(&a.output)
    );
    ensure!(!a.scales.is_empty() && a.scales.iter().all(|m| *m > 0.0 && m.is_finite()), "step scales must be positive");
    let sets = a
        .weights
        .iter()
        .map(|p| load_weights(Some(p)).map(Option::unwrap))
        .collect::<Result<Vec<_>>>()?;
    let first = sets.first();
    let wavelet = match (first, a.wavelet) {
        (Some(w), Some(v)) if w.meta.wavelet != v => bail!("weights were trained for {}, not {}", w.meta.wavelet.name(), v.name()),
        (Some(w), _) => w.meta.wavelet,
        (None, v) => v.unwrap_or(Wavelet::LeGall53),
    };
    let levels = match (first, a.levels) {
        (Some(w), Some(l)) if l != w.quant.num_levels() => bail!("weights carry {} levels, {l} requested", w.quant.num_levels()),
        (Some(w), _) => w.quant.num_levels(),
        (None, l) => l.unwrap_or(3),
    };
    for (w, p) in sets.iter().zip(&a.weights) {
        ensure!(
            w.meta.wavelet == wavelet && w.quant.num_levels() == levels,
            "{} does not share the wavelet and level count of the first weight file",
            p.display()
        );
    }
    let baseline_quant = match (a.delta, first) {
        (Some(d), _) => base_steps(levels, d, &TransformSpec::baseline(wavelet)),
        (None, Some(w)) => w.quant.with_unit_gains(),
        (None, None) => bail!("without weights the plain codec needs a base step (--delta)"),
    };
    let mut codecs = vec![SweepCodec {
        label: "baseline".into(),
        wavelet,
        mode: Mode::Baseline,
        weights: None,
        quant: baseline_quant,
    }];
    let mut labels = vec!["baseline".to_string()];
    for (w, p) in sets.iter().zip(&a.weights) {
        let stem = p.file_stem().map_or("weights".into(), |s| s.to_string_lossy().into_owned());
        let label = unique_label(&stem, &labels);
        labels.push(label.clone());
        codecs.push(SweepCodec { label, wavelet, mode: trained_mode(w), weights: Some(w), quant: w.quant.clone() });
    }
    let images = read_images(&a.manifest)?;
    let rows = rd_sweep(&images, &codecs, &a.scales, levels)?;
    if let Some(out) = &a.output {
        let f = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
        write_sweep_csv(&rows, std::io::BufWriter::new(f))?;
    }
    for label in &labels {
        for m in &a.scales {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| &r.codec == label && r.step_scale == *m).collect();
            let n = sel.len() as f64;
            println!(
                "{label:>12} x{m:<6} {:.4} bpp ({:.4} model)  PSNR {:.3} dB  SSIM {:.5}",
                sel.iter().map(|r| r.bpp_actual).sum::<f64>() / n,
                sel.iter().map(|r| r.bpp_estimated).sum::<f64>() / n,
                sel.iter().map(|r| r.psnr).sum::<f64>() / n,
                sel.iter().map(|r| r.ssim).sum::<f64>() / n
            );
        }
    }
    let tested = &labels[1..];
    print_bd(&rows, tested, "all")?;
    let mut categories: Vec<&str> = images.iter().map(|i| i.category.as_str()).collect();
    categories.sort_unstable();
    categories.dedup();
    if categories.len() > 1 {
        for c in categories {
            let sub: Vec<SweepRow> = rows.iter().filter(|r| r.category == c).cloned().collect();
            print_bd(&sub, tested, c)?;
        }
    }
    Ok(())
}

fn compaction(a: CompactionArgs) -> Result<()> {
    let w = load_weights(Some(&a.weights))?.expect("path given");
    let mode = a.mode.unwrap_or_else(|| trained_mode(&w));
    let levels = a.levels.unwrap_or(w.quant.num_levels());
    eprintln!(
        "nlc compaction images={:?} manifest={} weights={} mode={mode} levels={levels}",
        a.images,
        show(&a.manifest),
        a.weights.display()
    );
    let mut images = a
        .images
        .iter()
        .map(|p| read_pgm(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if let Some(m) = &a.manifest {
        images.extend(read_images(m)?.into_iter().map(|i| i.image));
    }
    ensure!(!images.is_empty(), "no images given");
    let spec = TransformSpec::for_weights(&w, mode)?;
    let table = energy_compaction(&images, levels, &spec, Some(&w.ops))?;
    print!("{}", table.render());
    Ok(())
}

fn dumpll(a: DumpllArgs) -> Result<()> {
    eprintln!(
        "nlc dumpll input={} weights={} level={} output={} stretch={}",
        a.input.display(),
        show(&a.weights),
        a.level,
        a.output.display(),
        a.stretch
    );
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let header = read_stream_header(&bytes)?;
    let w = load_weights(a.weights.as_deref())?;
    let mut ll = decode_resolution(&bytes, a.level, w.as_ref())?;
    let (lo, hi) = ll.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if a.stretch && hi > lo {
        let s = 255.0 / (hi - lo);
        ll.data.iter_mut().for_each(|v| *v = (*v - lo) * s);
    }
    write_pgm(&a.output, &ll).with_context(|| format!("writing {}", a.output.display()))?;
    println!(
        "{} LL of level {} ({}x{}), values {lo:.2}..{hi:.2}",
        header.mode, a.level, ll.width, ll.height
    );
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    eprintln!(
        "nlc synth alpha={} sharpness={} count={} size={} seed={} label={} output={}",
        a.alpha,
        a.sharpness,
        a.count,
        a.size,
        a.seed,
        a.label,
        a.output.display()
    );
    ensure!(!a.label.is_empty() && !a.label.contains(char::is_whitespace), "label must be one word");
    let cfg = SynthConfig { size: a.size, count: a.count, alpha: a.alpha, sharpness: a.sharpness, seed: a.seed };
    let corpus = oriented_edge_corpus(&cfg)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut manifest = String::new();
    for (i, img) in corpus.iter().enumerate() {
        let name = format!("synth_{i:04}.pgm");
        write_pgm(a.output.join(&name), img)?;
        manifest.push_str(&format!("{name} {}\n", a.label));
    }
    fs::write(a.output.join("manifest.txt"), manifest)?;
    println!("{} images written to {}", corpus.len(), a.output.display());
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NLC_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("NLC_THREADS={v:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compaction(a) => compaction(a),
        Command::Dumpll(a) => dumpll(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nlc: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

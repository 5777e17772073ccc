//! `bench`: timing of the correlation, fusion and decoder kernels on
//! seeded synthetic inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use stereo3d_core::stereo_core::{
    correlation_volume, decoder_forward, msf_forward, CorrelationVolume, DecoderConfig, DecoderWeights, FeatureMap,
    MsfConfig, MsfWeights, DEPTH_HEAD_CHANNELS,
};

use crate::config::RunConfig;
use crate::dataset::{json_bytes, write_atomic};

pub const SEED: u64 = 2024;
/// Quarter-scale size of a 288x1280 input.
pub const QUARTER: (usize, usize) = (72, 320);
pub const FEATURE_CHANNELS: usize = 64;
pub const MAX_DISPARITY: usize = 48;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchEntry {
    pub kernel: String,
    pub output_shape: [usize; 3],
    pub iters: usize,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    /// Output elements per second at the median time.
    pub throughput: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub jobs: usize,
    pub seed: u64,
    pub entries: Vec<BenchEntry>,
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap {
    FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0))
}

fn time<T>(iters: usize, mut f: impl FnMut() -> T) -> (Vec<f64>, T) {
    let mut out = f(); // warm-up
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        out = f();
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    (times, out)
}

fn entry(kernel: &str, mut times: Vec<f64>, out: &FeatureMap) -> BenchEntry {
    times.sort_by(f64::total_cmp);
    let median = if times.is_empty() {
        0.0
    } else if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    let (h, w, c) = out.shape();
    BenchEntry {
        kernel: kernel.to_string(),
        output_shape: [h, w, c],
        iters: times.len(),
        median_ms: median,
        min_ms: times.first().copied().unwrap_or(0.0),
        max_ms: times.last().copied().unwrap_or(0.0),
        throughput: if median > 0.0 { (h * w * c) as f64 / (median / 1e3) } else { 0.0 },
        checksum: format!("{:016x}", out.checksum()),
    }
}

pub fn run_bench(iters: usize, jobs: usize) -> anyhow::Result<BenchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (h, w) = QUARTER;
    let left = random_map(&mut rng, h, w, FEATURE_CHANNELS);
    let right = random_map(&mut rng, h, w, FEATURE_CHANNELS);
    let msf_cfg = MsfConfig::default();
    let [d4, d8, d16] = msf_cfg.disparities;
    let cv4 = CorrelationVolume(random_map(&mut rng, h, w, d4));
    let cv8 = CorrelationVolume(random_map(&mut rng, h / 2, w / 2, d8));
    let cv16 = CorrelationVolume(random_map(&mut rng, h / 4, w / 4, d16));
    let mut sample = || rng.gen_range(-0.1..0.1);
    let msf = MsfWeights::init_with(msf_cfg, &mut sample)?;
    let decoder = DecoderWeights::init_with(DecoderConfig::depth_head(), &mut sample)?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    pool.install(|| {
        let (t, cv) = time(iters, || correlation_volume(&left, &right, MAX_DISPARITY));
        let cv = cv?;
        let e1 = entry("correlation_volume", t, cv.map());
        let (t, f) = time(iters, || msf_forward(&cv4, &cv8, &cv16, &msf));
        let f = f?;
        let e2 = entry("msf_forward", t, f.map());
        let (t, d) = time(iters, || decoder_forward(&f, &decoder, DEPTH_HEAD_CHANNELS));
        let e3 = entry("decoder_forward", t, &d?);
        Ok(BenchReport {
            jobs,
            seed: SEED,
            entries: vec![e1, e2, e3],
        })
    })
}

pub fn cmd_bench(cfg: &RunConfig, iters: usize) -> anyhow::Result<()> {
    let report = run_bench(iters, cfg.jobs)?;
    for e in &report.entries {
        println!(
            "{:<20} {:>4}x{:<4}x{:<4} median {:>9.2} ms  ({:.3e} elem/s)  checksum {}",
            e.kernel, e.output_shape[0], e.output_shape[1], e.output_shape[2], e.median_ms, e.throughput, e.checksum
        );
    }
    write_atomic(&cfg.out.join("bench.json"), &json_bytes(&report)?)
}

//! Mask-head microbenchmark: the dynamic per-instance head against a
//! conventional fixed-weight crop head.
//!
//! The comparison head models the usual ROI design: four 3x3 convolutions
//! with 256 channels applied to 14x14 crops, one crop per instance — over
//! 2.3M parameters. The dynamic head is the generated FCN (169 parameters
//! at the default configuration) run over the shared mask-feature grid,
//! coordinate-map assembly included. Only forward cost is timed, with
//! medians over repeated runs after warmup.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::dynamic_head::{apply_mask_heads, build_coord_tensor, HeadArch};
use crate::error::Result;
use crate::heads::grid_coords;
use crate::nn::{ConvLayer, Init};
use crate::tensor::{no_grad, Tensor};

pub const CROP_SIZE: usize = 14;
pub const STATIC_CHANNELS: usize = 256;
pub const MIN_REPETITIONS: usize = 20;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub instances: usize,
    pub dynamic_ms: f64,
    pub static_ms: f64,
    /// Medians normalized to a 100-instance workload.
    pub dynamic_ms_per_100: f64,
    pub static_ms_per_100: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub threads: usize,
    pub repetitions: usize,
    pub rows: Vec<BenchRow>,
    pub dynamic_params_per_instance: usize,
    pub static_params: usize,
    pub hardware: String,
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "instances,dynamic_ms,static_ms,dynamic_ms_per_100,static_ms_per_100,speedup\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.4},{:.4},{:.4},{:.4},{:.2}\n",
                r.instances, r.dynamic_ms, r.static_ms, r.dynamic_ms_per_100, r.static_ms_per_100, r.speedup
            ));
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "mask-head benchmark ({} threads, medians of {} reps, {})\n\
             per-instance parameters: dynamic {} vs static {}\n",
            self.threads,
            self.repetitions,
            self.hardware,
            self.dynamic_params_per_instance,
            self.static_params
        );
        for r in &self.rows {
            s.push_str(&format!(
                "  {:>4} instances: dynamic {:.3} ms, static {:.3} ms ({:.1}x)\n",
                r.instances, r.dynamic_ms, r.static_ms, r.speedup
            ));
        }
        s
    }
}

fn median_ms(reps: usize, warmup: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

/// Fixed-weight comparison head: four 3x3 convs at 256 channels on
/// per-instance crops.
pub struct StaticMaskHead {
    convs: Vec<ConvLayer>,
}

impl StaticMaskHead {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let convs = (0..4)
            .map(|_| ConvLayer::new(rng, STATIC_CHANNELS, STATIC_CHANNELS, 3, 1, 1, Init::Kaiming))
            .collect();
        StaticMaskHead { convs }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn forward(&self, crops: &Tensor<f32>) -> Tensor<f32> {
        let mut x = crops.clone();
        for conv in &self.convs {
            x = conv.forward(&x).relu();
        }
        x
    }
}

fn hardware_note() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|text| {
            text.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1).map(|v| v.trim().to_string()))
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!("cpu: {model}")
}

/// Times both heads at each instance count inside a dedicated thread pool.
pub fn run_bench(
    cfg: &NetConfig,
    instance_counts: &[usize],
    threads: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    let reps = repetitions.max(MIN_REPETITIONS);
    let arch = HeadArch::from_model_config(&cfg.model)?;
    let grid = cfg.model.image_size / 8;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let f_mask_data: Vec<f32> = (0..cfg.model.c_mask * grid * grid)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let f_mask = Tensor::from_vec(&[1, cfg.model.c_mask, grid, grid], f_mask_data);
    let static_head = StaticMaskHead::new(&mut rng);
    let normalizer = cfg.coord_normalizers()[0];
    let all_locations = grid_coords(grid, grid, 8);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool");
    let effective_threads = pool.current_num_threads();

    let mut rows = Vec::with_capacity(instance_counts.len());
    for &k in instance_counts {
        let thetas_data: Vec<f32> = (0..k * arch.total_len())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let thetas = Tensor::from_vec(&[k, arch.total_len()], thetas_data);
        let locs: Vec<(f32, f32)> = (0..k)
            .map(|i| all_locations[(i * 37) % all_locations.len()])
            .collect();
        let norms = vec![normalizer; k];
        let batch_index = vec![0usize; k];
        let crops_data: Vec<f32> = (0..k * STATIC_CHANNELS * CROP_SIZE * CROP_SIZE)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let crops = Tensor::from_vec(&[k, STATIC_CHANNELS, CROP_SIZE, CROP_SIZE], crops_data);

        let (dynamic_ms, static_ms) = pool.install(|| {
            let dynamic_ms = median_ms(reps, 3, || {
                no_grad(|| {
                    let coords =
                        build_coord_tensor(cfg.model.coord_mode, (grid, grid), 8, &locs, &norms);
                    let features = cfg.model.coord_mode.uses_features().then_some(&f_mask);
                    let out = apply_mask_heads(features, coords.as_ref(), &thetas, &batch_index, arch)
                        .expect("bench shapes are consistent");
                    std::hint::black_box(out.data()[0]);
                });
            });
            let static_ms = median_ms(reps, 3, || {
                no_grad(|| {
                    let out = static_head.forward(&crops);
                    std::hint::black_box(out.data()[0]);
                });
            });
            (dynamic_ms, static_ms)
        });

        rows.push(BenchRow {
            instances: k,
            dynamic_ms,
            static_ms,
            dynamic_ms_per_100: dynamic_ms * 100.0 / k as f64,
            static_ms_per_100: static_ms * 100.0 / k as f64,
            speedup: static_ms / dynamic_ms,
        });
    }

    Ok(BenchReport {
        threads: effective_threads,
        repetitions: reps,
        rows,
        dynamic_params_per_instance: arch.total_len(),
        static_params: static_head.param_count(),
        hardware: hardware_note(),
    })
}

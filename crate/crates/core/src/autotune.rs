//! Benchmark-driven per-layer convolution kernel selection with a
//! persistent timing cache.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::RwLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvParams, ConvStrategy};
use crate::tensor::{Shape4, Tensor};

/// Bumped whenever kernels change enough to invalidate stored timings.
pub const CACHE_VERSION: u32 = 1;
const CACHE_MAGIC: &str = "hpcnn-tune-cache";

/// Shape key for kernel selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSignature {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
}

impl LayerSignature {
    pub fn new(input: Shape4, g: &ConvGeometry) -> Self {
        LayerSignature {
            n: input.n,
            c_in: input.c,
            h: input.h,
            w: input.w,
            c_out: g.out_channels,
            k: g.kernel,
            s: g.stride,
            p: g.padding,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry {
            in_channels: self.c_in,
            out_channels: self.c_out,
            kernel: self.k,
            stride: self.s,
            padding: self.p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.geometry();
        g.validate()?;
        Shape4::new(self.n, self.c_in, self.h, self.w)?;
        g.output_hw(self.h, self.w).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneEntry {
    /// Median seconds per strategy; `None` when not measured.
    pub direct_s: Option<f64>,
    pub unroll_s: Option<f64>,
    pub chosen: ConvStrategy,
    pub warning: Option<String>,
}

impl TuneEntry {
    pub fn time(&self, s: ConvStrategy) -> Option<f64> {
        match s {
            ConvStrategy::Direct => self.direct_s,
            ConvStrategy::Unroll => self.unroll_s,
        }
    }
}

/// Argmin over measured times; exact ties resolve to DIRECT.
pub fn choose(times: &[(ConvStrategy, f64)]) -> ConvStrategy {
    let mut best: Option<(ConvStrategy, f64)> = None;
    for &(s, t) in times {
        best = match best {
            None => Some((s, t)),
            Some((bs, bt)) if t < bt || (t == bt && s == ConvStrategy::Direct && bs != s) => Some((s, t)),
            keep => keep,
        };
    }
    best.map(|(s, _)| s).unwrap_or(ConvStrategy::Direct)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TuneCache {
    entries: BTreeMap<LayerSignature, TuneEntry>,
}

impl TuneCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, sig: &LayerSignature) -> Option<&TuneEntry> {
        self.entries.get(sig)
    }

    pub fn insert(&mut self, sig: LayerSignature, entry: TuneEntry) {
        self.entries.insert(sig, entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerSignature, &TuneEntry)> {
        self.entries.iter()
    }

    /// Tab-separated text: a version line, a header, one row per signature.
    pub fn to_text(&self) -> String {
        let mut s = format!("{CACHE_MAGIC} v{CACHE_VERSION}\n");
        s.push_str("n\tc_in\th\tw\tc_out\tk\ts\tp\tdirect_s\tunroll_s\tchosen\n");
        let fmt = |t: Option<f64>| t.map(|v| format!("{v:.9}")).unwrap_or_else(|| "-".into());
        for (g, e) in &self.entries {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                g.n,
                g.c_in,
                g.h,
                g.w,
                g.c_out,
                g.k,
                g.s,
                g.p,
                fmt(e.direct_s),
                fmt(e.unroll_s),
                e.chosen.name()
            );
        }
        s
    }

    /// Parses [`TuneCache::to_text`] output. A different version stamp
    /// yields an empty cache.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines.next().unwrap_or_default();
        if head.trim() != format!("{CACHE_MAGIC} v{CACHE_VERSION}") {
            log::warn!("tuning cache version stamp {head:?} does not match; starting empty");
            return Ok(Self::new());
        }
        let _columns = lines.next();
        let mut cache = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Config(format!("tuning cache row {}: malformed {line:?}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 11 {
                return Err(bad());
            }
            let u = |j: usize| f[j].parse::<usize>().map_err(|_| bad());
            let t = |j: usize| -> Result<Option<f64>> {
                if f[j] == "-" {
                    Ok(None)
                } else {
                    f[j].parse::<f64>().map(Some).map_err(|_| bad())
                }
            };
            let sig = LayerSignature { n: u(0)?, c_in: u(1)?, h: u(2)?, w: u(3)?, c_out: u(4)?, k: u(5)?, s: u(6)?, p: u(7)? };
            let entry = TuneEntry { direct_s: t(8)?, unroll_s: t(9)?, chosen: f[10].parse()?, warning: None };
            cache.insert(sig, entry);
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    /// Loads a cache file; a missing file is an empty cache.
    pub fn load(path: &Path) -> Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_text(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Runs `f` `warmup` times unmeasured, then `reps` measured times.
pub fn benchmark_samples(mut f: impl FnMut(), warmup: usize, reps: usize) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

/// Median seconds of `reps` measured calls after `warmup` unmeasured ones.
pub fn benchmark_op(f: impl FnMut(), warmup: usize, reps: usize) -> f64 {
    median(&benchmark_samples(f, warmup, reps))
}

/// Measures forward + backward of one strategy on a signature.
pub type Measure = dyn Fn(&LayerSignature, ConvStrategy) -> Result<f64> + Send + Sync;

/// Owns the tuning cache and the measurement routine.
pub struct Tuner {
    cache: RwLock<TuneCache>,
    measurements: AtomicUsize,
    measure: Box<Measure>,
}

impl std::fmt::Debug for Tuner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tuner")
            .field("entries", &self.cache.read().map(|c| c.len()).unwrap_or(0))
            .field("measurements", &self.measurements())
            .finish()
    }
}

impl Tuner {
    /// A tuner that benchmarks both kernels on random data with a batch of
    /// `tune_batch` items.
    pub fn new(warmup: usize, reps: usize, tune_batch: usize) -> Self {
        Self::with_measure(move |sig, strategy| measure_conv(sig, strategy, warmup, reps, tune_batch))
    }

    pub fn with_measure(measure: impl Fn(&LayerSignature, ConvStrategy) -> Result<f64> + Send + Sync + 'static) -> Self {
        Tuner { cache: RwLock::new(TuneCache::new()), measurements: AtomicUsize::new(0), measure: Box::new(measure) }
    }

    pub fn with_cache(self, cache: TuneCache) -> Self {
        *self.cache.write().expect("tune cache poisoned") = cache;
        self
    }

    /// Number of strategy measurements performed so far.
    pub fn measurements(&self) -> usize {
        self.measurements.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> TuneCache {
        self.cache.read().expect("tune cache poisoned").clone()
    }

    /// Cached choice for `sig`, measuring both strategies on a miss.
    pub fn select(&self, sig: &LayerSignature) -> ConvStrategy {
        if let Some(e) = self.cache.read().expect("tune cache poisoned").get(sig) {
            return e.chosen;
        }
        let mut cache = self.cache.write().expect("tune cache poisoned");
        if let Some(e) = cache.get(sig) {
            return e.chosen;
        }
        let mut times = Vec::new();
        let mut warning = None;
        for s in [ConvStrategy::Unroll, ConvStrategy::Direct] {
            self.measurements.fetch_add(1, Ordering::SeqCst);
            match (self.measure)(sig, s) {
                Ok(t) => times.push((s, t)),
                Err(e) => warning = Some(format!("{} measurement failed: {e}", s.name())),
            }
        }
        let chosen = if warning.is_some() { ConvStrategy::Direct } else { choose(&times) };
        if let Some(w) = &warning {
            log::warn!("autotune {sig:?}: {w}; falling back to DIRECT");
        }
        let get = |s| times.iter().find(|(x, _)| *x == s).map(|&(_, t)| t);
        let entry = TuneEntry { direct_s: get(ConvStrategy::Direct), unroll_s: get(ConvStrategy::Unroll), chosen, warning };
        log::debug!("autotune {sig:?} -> {}", chosen.name());
        cache.insert(*sig, entry);
        chosen
    }
}

/// Strategy for `sig`: the tuner's choice, or static UNROLL without one.
pub fn autotune_select(sig: &LayerSignature, tuner: Option<&Tuner>) -> ConvStrategy {
    match tuner {
        Some(t) => t.select(sig),
        None => ConvStrategy::Unroll,
    }
}

fn measure_conv(sig: &LayerSignature, strategy: ConvStrategy, warmup: usize, reps: usize, tune_batch: usize) -> Result<f64> {
    sig.validate()?;
    let g = sig.geometry();
    let n = sig.n.min(tune_batch).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x7u64 ^ (sig.c_in * 31 + sig.c_out) as u64);
    let mut rand_tensor = |shape: &[usize]| -> Result<Tensor<f32>> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
    };
    let x = rand_tensor(&[n, sig.c_in, sig.h, sig.w])?;
    let params = ConvParams::new(g, rand_tensor(&g.weight_shape())?, None)?;
    let (_, so) = params.shapes(&x)?;
    let grad = rand_tensor(&so.dims())?;
    let mut failure = None;
    let t = benchmark_op(
        || {
            let r = conv2d_forward(&x, &params, strategy).and_then(|_| conv2d_backward(&x, &params, strategy, &grad));
            if let Err(e) = r {
                failure = Some(e);
            }
        },
        warmup,
        reps,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(t),
    }
}

//! Analytical latency and memory model for prefill (compute bound) and
//! decoding (memory bound), with and without chunk compression, plus an
//! empirical microbenchmark of the toy model.
//!
//! Prefill costs `(24 d^2 + 4 d s) l b s` flops; decoding moves `2n` bytes of
//! bf16 parameters plus `4 d l b (s + o)` bytes of KV cache per token.
//! Compression replaces `s` with `ceil(s / k)`.

mod bench;

use std::fmt;

use num_traits::{FromPrimitive, Num};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use bench::{microbench, series, BenchConfig, BenchRow};

/// Accelerator roofline: flop rate and memory bandwidth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// Flops per second (`f`).
    pub flops: f64,
    /// Memory bandwidth in bytes per second (`m`).
    pub bandwidth: f64,
}

impl HardwareProfile {
    pub fn new(flops: f64, bandwidth: f64) -> Result<Self> {
        let p = Self { flops, bandwidth };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.flops > 0.0 && self.flops.is_finite() && self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(invalid(format!(
                "hardware profile needs positive finite f and m, got f={} m={}",
                self.flops, self.bandwidth
            )));
        }
        Ok(())
    }
}

/// Model and workload shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeProfile {
    /// Hidden width.
    pub d: u64,
    /// Decoder layers.
    pub l: u64,
    /// Parameter count.
    pub n: u64,
    /// Batch size.
    pub b: u64,
    /// Context tokens.
    pub s: u64,
    /// Output tokens.
    pub o: u64,
    /// Compression rate.
    pub k: u64,
}

impl ShapeProfile {
    /// LLaMA-2-7B: `d = 4096`, 32 layers, 6.74B parameters, batch 1.
    pub fn llama2_7b(s: u64, o: u64, k: u64) -> Self {
        Self { d: 4096, l: 32, n: 6_738_415_616, b: 1, s, o, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l == 0 || self.b == 0 || self.k == 0 {
            return Err(invalid(format!("d, l, b and k must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Context length the decoder sees after compression.
    pub fn compressed_s(&self) -> u64 {
        self.s.div_ceil(self.k)
    }

    fn with_s(&self, s: u64) -> Self {
        Self { s, ..*self }
    }
}

fn mul(xs: &[u128]) -> Result<u128> {
    xs.iter().try_fold(1u128, |acc, &x| acc.checked_mul(x)).ok_or_else(|| invalid("value overflows u128"))
}

/// Prefill flops `(24 d^2 + 4 d s) l b s`.
pub fn prefill_flops(b: u64, s: u64, d: u64, l: u64) -> Result<u128> {
    if b == 0 || s == 0 || d == 0 || l == 0 {
        return Err(invalid(format!("prefill_flops needs positive inputs, got b={b} s={s} d={d} l={l}")));
    }
    let (b, s, d, l) = (b as u128, s as u128, d as u128, l as u128);
    let per_token = mul(&[24, d, d])?.checked_add(mul(&[4, d, s])?).ok_or_else(|| invalid("value overflows u128"))?;
    mul(&[per_token, l, b, s])
}

/// KV cache bytes `4 d l b (s + o)`.
pub fn kv_bytes(d: u64, l: u64, b: u64, s: u64, o: u64) -> Result<u128> {
    mul(&[4, d as u128, l as u128, b as u128, s as u128 + o as u128])
}

fn shape_for(shape: &ShapeProfile, compressed: bool) -> Result<ShapeProfile> {
    shape.validate()?;
    Ok(if compressed { shape.with_s(shape.compressed_s()) } else { *shape })
}

/// Time to first token, `prefill_flops / f`.
pub fn ttft(profile: &HardwareProfile, shape: &ShapeProfile, compressed: bool) -> Result<f64> {
    profile.validate()?;
    let sh = shape_for(shape, compressed)?;
    Ok(prefill_flops(sh.b, sh.s, sh.d, sh.l)? as f64 / profile.flops)
}

/// Time per iterative token, `(2n + 4 d l b (s + o)) / m`.
pub fn ttit(profile: &HardwareProfile, shape: &ShapeProfile, compressed: bool) -> Result<f64> {
    profile.validate()?;
    let sh = shape_for(shape, compressed)?;
    let bytes =
        (2 * sh.n as u128).checked_add(kv_bytes(sh.d, sh.l, sh.b, sh.s, sh.o)?).ok_or_else(|| invalid("value overflows u128"))?;
    Ok(bytes as f64 / profile.bandwidth)
}

/// Tokens per second `b o / (TTFT + DL)` with the data latency `DL = TTIT`.
pub fn throughput(profile: &HardwareProfile, shape: &ShapeProfile, compressed: bool) -> Result<f64> {
    let t = ttft(profile, shape, compressed)? + ttit(profile, shape, compressed)?;
    Ok((shape.b * shape.o) as f64 / t)
}

/// Baseline and compressed figures for one shape. Ratios are
/// baseline / compressed except throughput, which is compressed / baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub shape: ShapeProfile,
    pub profile: HardwareProfile,
    pub ttft_baseline: f64,
    pub ttft_compressed: f64,
    pub ttit_baseline: f64,
    pub ttit_compressed: f64,
    pub kv_baseline: u128,
    pub kv_compressed: u128,
    pub throughput_baseline: f64,
    pub throughput_compressed: f64,
    pub ttft_ratio: f64,
    pub ttit_ratio: f64,
    pub kv_ratio: f64,
    pub throughput_ratio: f64,
}

impl LatencyReport {
    pub fn new(profile: &HardwareProfile, shape: &ShapeProfile) -> Result<Self> {
        let c = shape_for(shape, true)?;
        let ttft_baseline = ttft(profile, shape, false)?;
        let ttft_compressed = ttft(profile, shape, true)?;
        let ttit_baseline = ttit(profile, shape, false)?;
        let ttit_compressed = ttit(profile, shape, true)?;
        let kv_baseline = kv_bytes(shape.d, shape.l, shape.b, shape.s, shape.o)?;
        let kv_compressed = kv_bytes(c.d, c.l, c.b, c.s, c.o)?;
        let throughput_baseline = throughput(profile, shape, false)?;
        let throughput_compressed = throughput(profile, shape, true)?;
        Ok(Self {
            shape: *shape,
            profile: *profile,
            ttft_baseline,
            ttft_compressed,
            ttit_baseline,
            ttit_compressed,
            kv_baseline,
            kv_compressed,
            throughput_baseline,
            throughput_compressed,
            ttft_ratio: ttft_baseline / ttft_compressed,
            ttit_ratio: ttit_baseline / ttit_compressed,
            kv_ratio: kv_baseline as f64 / kv_compressed as f64,
            throughput_ratio: throughput_compressed / throughput_baseline,
        })
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.shape;
        writeln!(
            f,
            "# d={} l={} n={} b={} s={} o={} k={}  f={:.3e} flop/s  m={:.3e} B/s",
            s.d, s.l, s.n, s.b, s.s, s.o, s.k, self.profile.flops, self.profile.bandwidth
        )?;
        writeln!(f, "{:<16}{:>16}{:>16}{:>10}", "metric", "baseline", "compressed", "ratio")?;
        writeln!(f, "{:<16}{:>16.6e}{:>16.6e}{:>10.3}", "ttft_s", self.ttft_baseline, self.ttft_compressed, self.ttft_ratio)?;
        writeln!(f, "{:<16}{:>16.6e}{:>16.6e}{:>10.3}", "ttit_s", self.ttit_baseline, self.ttit_compressed, self.ttit_ratio)?;
        writeln!(f, "{:<16}{:>16}{:>16}{:>10.3}", "kv_bytes", self.kv_baseline, self.kv_compressed, self.kv_ratio)?;
        write!(
            f,
            "{:<16}{:>16.6e}{:>16.6e}{:>10.3}",
            "throughput_tok_s", self.throughput_baseline, self.throughput_compressed, self.throughput_ratio
        )
    }
}

fn lit<N: FromPrimitive>(x: u64) -> N {
    N::from_u64(x).expect("every numeric type used here represents u64")
}

/// TTFT acceleration `k^2 (6ds + s^2) / (6dsk + s^2)`, exact for rational `N`.
pub fn ttft_ratio<N: Num + Clone>(k: N, s: N, d: N) -> N {
    let six = N::one() + N::one() + N::one() + N::one() + N::one() + N::one();
    let ds6 = six * d * s.clone();
    let s2 = s.clone() * s;
    k.clone() * k.clone() * (ds6.clone() + s2.clone()) / (ds6 * k + s2)
}

/// KV cache saving `(ks + ko) / (s + ko)`.
pub fn kv_ratio<N: Num + Clone>(k: N, s: N, o: N) -> N {
    let ko = k.clone() * o;
    (k * s.clone() + ko.clone()) / (s + ko)
}

/// TTIT acceleration `(2dlbsk + nk + 2dlbok) / (2dlbs + nk + 2dlbok)`.
pub fn ttit_ratio<N: Num + Clone>(k: N, s: N, o: N, d: N, l: N, b: N, n: N) -> N {
    let two = N::one() + N::one();
    let dlb2 = two * d * l * b;
    let nk = n * k.clone();
    let ok = dlb2.clone() * o * k.clone();
    (dlb2.clone() * s.clone() * k + nk.clone() + ok.clone()) / (dlb2 * s + nk + ok)
}

/// The four acceleration factors of compressing at rate `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Acceleration<N> {
    pub kv: N,
    pub ttft: N,
    pub ttit: N,
    pub throughput: N,
}

/// Acceleration factors from the closed forms with the exact ratio `s / k`
/// (no rounding up). Throughput compares `TTFT + TTIT` before and after.
pub fn acceleration_report<N: Num + Clone + FromPrimitive>(
    profile: &HardwareProfile,
    shape: &ShapeProfile,
) -> Result<Acceleration<N>> {
    profile.validate()?;
    shape.validate()?;
    if shape.s == 0 {
        return Err(invalid("acceleration needs s > 0"));
    }
    let [k, s, o, d, l, b, n]: [N; 7] = [shape.k, shape.s, shape.o, shape.d, shape.l, shape.b, shape.n].map(lit);
    let f = N::from_f64(profile.flops).ok_or_else(|| invalid("flop rate not representable"))?;
    let m = N::from_f64(profile.bandwidth).ok_or_else(|| invalid("bandwidth not representable"))?;
    let latency = |s: N| {
        let prefill =
            (lit::<N>(24) * d.clone() * d.clone() + lit::<N>(4) * d.clone() * s.clone()) * l.clone() * b.clone() * s.clone();
        let data = lit::<N>(2) * n.clone() + lit::<N>(4) * d.clone() * l.clone() * b.clone() * (s + o.clone());
        prefill / f.clone() + data / m.clone()
    };
    let sc = s.clone() / k.clone();
    Ok(Acceleration {
        kv: kv_ratio(k.clone(), s.clone(), o.clone()),
        ttft: ttft_ratio(k.clone(), s.clone(), d.clone()),
        ttit: ttit_ratio(k, s.clone(), o.clone(), d.clone(), l.clone(), b.clone(), n.clone()),
        throughput: latency(s) / latency(sc),
    })
}

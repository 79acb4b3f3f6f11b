//! Synthetic wrist-accelerometer recordings for the integration tests:
//! quiet activity noise around gravity, interrupted by short high-magnitude
//! spike bursts standing in for falls. Every sample is point-labeled, so the
//! recordings can drive the whole pipeline from CSV ingestion to streaming
//! replay.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use falldef::dataset::{Label, Sample, Segment};
use falldef::numerics::Rng;

/// Native sampling rate of the simulated device.
pub const RATE_HZ: f64 = 31.25;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone)]
pub struct CorpusSpec {
    /// Quiet samples before the first burst.
    pub lead_in: usize,
    pub bursts: usize,
    /// Samples per burst; matches the classifier window.
    pub burst_len: usize,
    /// Burst-start to burst-start distance in samples. Kept well above the
    /// alert cooldown (10 s = 312.5 samples) so every burst can alert.
    pub period: usize,
    /// Quiet samples after the last burst.
    pub tail: usize,
    /// Quiet jitter amplitude on each axis.
    pub noise_amp: f64,
    /// Spike magnitude range during bursts.
    pub spike_min: f64,
    pub spike_max: f64,
    pub seed: u64,
}

impl CorpusSpec {
    /// The training corpus: 65 bursts x 31 fall windows each = 2,015 fall
    /// windows under the 40-point window / 25-point labeling rule, and far
    /// more non-fall windows.
    pub fn training() -> CorpusSpec {
        CorpusSpec {
            lead_in: 200,
            bursts: 65,
            burst_len: 40,
            period: 500,
            tail: 260,
            noise_amp: 0.3,
            spike_min: 3.0,
            spike_max: 8.0,
            seed: 7,
        }
    }

    /// One burst with enough quiet around it for timing measurements.
    pub fn single_burst(seed: u64) -> CorpusSpec {
        CorpusSpec {
            lead_in: 100,
            bursts: 1,
            tail: 160,
            seed,
            ..CorpusSpec::training()
        }
    }

    /// Quiet activity only; labels are all non-fall.
    pub fn adl_only(seed: u64) -> CorpusSpec {
        CorpusSpec {
            lead_in: 600,
            bursts: 0,
            tail: 0,
            seed,
            ..CorpusSpec::training()
        }
    }

    /// A corpus small enough for repeated end-to-end CLI runs.
    pub fn small(seed: u64) -> CorpusSpec {
        CorpusSpec {
            lead_in: 120,
            bursts: 8,
            period: 120,
            tail: 120,
            seed,
            ..CorpusSpec::training()
        }
    }

    pub fn total_samples(&self) -> usize {
        let burst_span = match self.bursts {
            0 => 0,
            n => (n - 1) * self.period + self.burst_len,
        };
        self.lead_in + burst_span + self.tail
    }

    /// Sample indices where each burst starts.
    pub fn onsets(&self) -> Vec<usize> {
        (0..self.bursts).map(|k| self.lead_in + k * self.period).collect()
    }

    /// Event times (seconds) where each burst starts.
    pub fn onset_times(&self) -> Vec<f64> {
        self.onsets().iter().map(|&i| i as f64 / RATE_HZ).collect()
    }
}

fn in_burst(spec: &CorpusSpec, i: usize) -> bool {
    if spec.bursts == 0 || i < spec.lead_in {
        return false;
    }
    let offset = (i - spec.lead_in) % spec.period;
    (i - spec.lead_in) / spec.period < spec.bursts && offset < spec.burst_len
}

/// Generate one fully labeled segment: gravity on the z axis, small jitter
/// everywhere, and signed spikes on all axes during bursts.
pub fn generate(spec: &CorpusSpec) -> Segment {
    let mut rng = Rng::new(spec.seed);
    let mut samples = Vec::with_capacity(spec.total_samples());
    for i in 0..spec.total_samples() {
        let mut ax = rng.uniform(-spec.noise_amp, spec.noise_amp);
        let mut ay = rng.uniform(-spec.noise_amp, spec.noise_amp);
        let mut az = GRAVITY + rng.uniform(-spec.noise_amp, spec.noise_amp);
        let label = if in_burst(spec, i) {
            for axis in [&mut ax, &mut ay, &mut az] {
                let magnitude = rng.uniform(spec.spike_min, spec.spike_max);
                let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
                *axis += sign * magnitude;
            }
            Label::Fall
        } else {
            Label::NonFall
        };
        samples.push(Sample {
            t: Some(i as f64 / RATE_HZ),
            ax,
            ay,
            az,
            point_label: Some(label),
        });
    }
    Segment {
        segment_id: format!("synthetic-{}", spec.seed),
        samples,
    }
}

/// Write a segment as the default CSV flavor (`t,ax,ay,az,label` header,
/// labels 0/1). Floats use the shortest round-trip form, so re-reading the
/// file reproduces the values bit for bit.
pub fn write_csv(path: &Path, segment: &Segment) -> std::io::Result<()> {
    let mut out = String::from("t,ax,ay,az,label\n");
    for s in &segment.samples {
        let label = match s.point_label {
            Some(Label::Fall) => 1,
            _ => 0,
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{label}",
            s.t.expect("generated samples carry timestamps"),
            s.ax,
            s.ay,
            s.az
        );
    }
    std::fs::write(path, out)
}

/// Generate and write in one step; returns the segment for callers that
/// need the ground truth too.
pub fn write_corpus(path: &Path, spec: &CorpusSpec) -> Segment {
    let segment = generate(spec);
    write_csv(path, &segment).expect("write synthetic corpus");
    segment
}

//! Rate-equation model of the spectral preparation.
//!
//! Ions are indexed by the optical offset `u` of their own g1-e5 line from
//! the nominal f15 carrier. The optical inhomogeneous width is far larger
//! than every laser detuning used here, so the unprepared density is flat in
//! `u` and a single grid represents every ion. A laser at offset `nu` (from
//! f15) addresses the (g, e) line of ion `u` when `u + line_offset(g, e)`
//! lies inside its window. The nine "classes" are the sets of ions whose
//! (g, e) line sits at the nominal f15 frequency.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::{ProfileError, SpectralProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ground {
    G1,
    G3,
    G5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Excited {
    E1,
    E3,
    E5,
}

impl Ground {
    pub const ALL: [Ground; 3] = [Ground::G1, Ground::G3, Ground::G5];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl Excited {
    pub const ALL: [Excited; 3] = [Excited::E1, Excited::E3, Excited::E5];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One optical line (ground, excited).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Line {
    pub ground: Ground,
    pub excited: Excited,
}

impl Line {
    pub const F15: Line = Line { ground: Ground::G1, excited: Excited::E5 };
    pub const F35: Line = Line { ground: Ground::G3, excited: Excited::E5 };
    pub const F13: Line = Line { ground: Ground::G1, excited: Excited::E3 };
    pub const F53: Line = Line { ground: Ground::G5, excited: Excited::E3 };

    pub fn all() -> impl Iterator<Item = Line> {
        Ground::ALL.into_iter().flat_map(|ground| Excited::ALL.into_iter().map(move |excited| Line { ground, excited }))
    }
}

/// Hyperfine level energies, Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperfine {
    pub ground: [f64; 3],
    pub excited: [f64; 3],
}

impl Default for Hyperfine {
    fn default() -> Self {
        Self { ground: [0.0, 34.5e6, 80.7e6], excited: [0.0, 75.0e6, 177.0e6] }
    }
}

impl Hyperfine {
    /// Frequency of `line` relative to the g1-e5 line of the same ion.
    pub fn line_offset(&self, line: Line) -> f64 {
        (self.excited[line.excited.index()] - self.excited[Excited::E5.index()])
            - (self.ground[line.ground.index()] - self.ground[Ground::G1.index()])
    }

    /// Smallest separation between two distinct line offsets.
    pub fn min_line_spacing(&self) -> f64 {
        let mut offsets: Vec<f64> = Line::all().map(|l| self.line_offset(l)).collect();
        offsets.sort_by(f64::total_cmp);
        offsets.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrepError {
    #[error("pump window [{lo:e}, {hi:e}] Hz maps outside the population grid")]
    WindowOutsideGrid { lo: f64, hi: f64 },
    #[error("transfer fraction {0} outside [0, 1]")]
    InvalidTransfer(f64),
    #[error("redistribution weights must be nonnegative, zero on the diagonal, with rows summing to one")]
    InvalidRedistribution,
    #[error("calibration must be strictly positive")]
    InvalidCalibration,
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// Ground-level population densities on a uniform grid of ion offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralPopulation {
    pub hyperfine: Hyperfine,
    /// Offset of the first cell, Hz.
    pub start: f64,
    pub step: f64,
    /// `levels[g][i]`: population of ground level `g` in cell `i`.
    pub levels: [Vec<f64>; 3],
}

pub const DEFAULT_STEP: f64 = 25e3;

impl SpectralPopulation {
    /// Unprepared population (one third per ground level) on a grid that
    /// covers every line addressed by lasers within `laser_range` of f15.
    pub fn unprepared(hyperfine: Hyperfine, laser_range: (f64, f64), step: f64) -> Self {
        let offsets: Vec<f64> = Line::all().map(|l| hyperfine.line_offset(l)).collect();
        let max_off = offsets.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_off = offsets.iter().cloned().fold(f64::INFINITY, f64::min);
        let lo = ((laser_range.0 - max_off) / step).floor() * step - step;
        let hi = ((laser_range.1 - min_off) / step).ceil() * step + step;
        let cells = ((hi - lo) / step).round() as usize + 1;
        let third = vec![1.0 / 3.0; cells];
        Self { hyperfine, start: lo, step, levels: [third.clone(), third.clone(), third] }
    }

    /// Grid for the default hyperfine structure and the reference lasers
    /// schedule.
    pub fn reference_default() -> Self {
        let h = Hyperfine::default();
        let lasers: Vec<f64> = [Line::F15, Line::F35, Line::F13, Line::F53].iter().map(|&l| h.line_offset(l)).collect();
        let lo = lasers.iter().cloned().fold(f64::INFINITY, f64::min) - 12e6;
        let hi = lasers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12e6;
        Self::unprepared(h, (lo, hi), DEFAULT_STEP)
    }

    pub fn cells(&self) -> usize {
        self.levels[0].len()
    }

    pub fn offset(&self, cell: usize) -> f64 {
        self.start + cell as f64 * self.step
    }

    pub fn total(&self) -> f64 {
        self.levels.iter().map(|l| l.iter().sum::<f64>()).sum()
    }

    /// Cells whose centre offset lies in `[lo, hi]`.
    fn cell_range(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let first = ((lo - self.start) / self.step).ceil();
        let last = ((hi - self.start) / self.step).floor();
        if first < 0.0 || last >= self.cells() as f64 {
            return None;
        }
        if last < first {
            return Some((first as usize, first as usize));
        }
        Some((first as usize, last as usize + 1))
    }

    /// Population on `line`'s ground level for ions whose `line` falls in
    /// the laser window `[nu_lo, nu_hi]` (offsets from f15).
    pub fn population_in_window(&self, line: Line, nu_lo: f64, nu_hi: f64) -> f64 {
        let off = self.hyperfine.line_offset(line);
        match self.cell_range(nu_lo - off, nu_hi - off) {
            Some((a, b)) => self.levels[line.ground.index()][a..b].iter().sum(),
            None => 0.0,
        }
    }

    /// Density of ion class `line` (ions whose `line` sits at offset `nu`
    /// from f15) in its own ground level, over the window `[nu_lo, nu_hi]`.
    pub fn class_population(&self, line: Line, nu_lo: f64, nu_hi: f64) -> f64 {
        self.population_in_window(line, nu_lo, nu_hi)
    }
}

/// One swept pump pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pump {
    /// Nominal line the pump is tuned to.
    pub line: Line,
    /// Centre detuning from that line, Hz.
    #[serde(default)]
    pub detuning: f64,
    pub sweep_width: f64,
    #[serde(default = "one")]
    pub repetitions: u32,
}

fn one() -> u32 {
    1
}

impl Pump {
    pub fn new(line: Line, sweep_width: f64) -> Self {
        Self { line, detuning: 0.0, sweep_width, repetitions: 1 }
    }

    pub fn repeated(self, repetitions: u32) -> Self {
        Self { repetitions, ..self }
    }

    /// Laser window as offsets from f15.
    pub fn window(&self, hyperfine: &Hyperfine) -> (f64, f64) {
        let c = hyperfine.line_offset(self.line) + self.detuning;
        (c - 0.5 * self.sweep_width, c + 0.5 * self.sweep_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleStep {
    Pump(Pump),
    Repeat { times: u32, steps: Vec<ScheduleStep> },
}

/// Per-pass transfer and where transferred population goes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PumpModel {
    /// Fraction of a pumped level's population moved per pass.
    pub transfer: f64,
    /// `redistribution[from][to]` over ground levels.
    pub redistribution: [[f64; 3]; 3],
}

impl Default for PumpModel {
    fn default() -> Self {
        Self { transfer: 0.5, redistribution: [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]] }
    }
}

impl PumpModel {
    pub fn validate(&self) -> Result<(), PrepError> {
        if !(0.0..=1.0).contains(&self.transfer) {
            return Err(PrepError::InvalidTransfer(self.transfer));
        }
        for (i, row) in self.redistribution.iter().enumerate() {
            let ok = row[i] == 0.0 && row.iter().all(|w| *w >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
            if !ok {
                return Err(PrepError::InvalidRedistribution);
            }
        }
        Ok(())
    }
}

/// Applies `pump.repetitions` passes of one pump.
pub fn pump_step(pop: &SpectralPopulation, pump: &Pump, model: &PumpModel) -> Result<SpectralPopulation, PrepError> {
    model.validate()?;
    let (lo, hi) = pump.window(&pop.hyperfine);
    let own = pop.hyperfine.line_offset(pump.line);
    if pop.cell_range(lo - own, hi - own).is_none() {
        return Err(PrepError::WindowOutsideGrid { lo, hi });
    }
    let mut out = pop.clone();
    if pump.repetitions == 0 || model.transfer == 0.0 {
        return Ok(out);
    }
    let mut mask = vec![0u8; pop.cells()];
    for line in Line::all() {
        let off = pop.hyperfine.line_offset(line);
        if let Some((a, b)) = pop.cell_range(lo - off, hi - off) {
            for m in &mut mask[a..b] {
                *m |= 1 << line.ground.index();
            }
        }
    }
    let p = model.transfer;
    let w = &model.redistribution;
    for (cell, &m) in mask.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let mut rho = [out.levels[0][cell], out.levels[1][cell], out.levels[2][cell]];
        for _ in 0..pump.repetitions {
            let moved: [f64; 3] = std::array::from_fn(|g| if m & (1 << g) != 0 { p * rho[g] } else { 0.0 });
            let mut next = rho;
            for from in 0..3 {
                if moved[from] == 0.0 {
                    continue;
                }
                next[from] -= moved[from];
                for to in 0..3 {
                    next[to] += moved[from] * w[from][to];
                }
            }
            rho = next;
        }
        for g in 0..3 {
            out.levels[g][cell] = rho[g];
        }
    }
    Ok(out)
}

pub fn run_preparation(
    initial: &SpectralPopulation,
    schedule: &[ScheduleStep],
    model: &PumpModel,
) -> Result<SpectralPopulation, PrepError> {
    let mut pop = initial.clone();
    for step in schedule {
        match step {
            ScheduleStep::Pump(pump) => pop = pump_step(&pop, pump, model)?,
            ScheduleStep::Repeat { times, steps } => {
                for _ in 0..*times {
                    pop = run_preparation(&pop, steps, model)?;
                }
            }
        }
    }
    Ok(pop)
}

/// Class cleaning: pumps at f15, f35, f13 and f53, 5 MHz each, cycled 100
/// times.
pub fn class_cleaning() -> Vec<ScheduleStep> {
    vec![ScheduleStep::Repeat {
        times: 100,
        steps: [Line::F15, Line::F35, Line::F13, Line::F53]
            .into_iter()
            .map(|l| ScheduleStep::Pump(Pump::new(l, 5e6)))
            .collect(),
    }]
}

/// Full memory preparation: class cleaning, spin polarization into g5 with
/// 3 MHz chirps at f15 and f35, then a 700 kHz backpump at f53 alternated
/// with f35 chirps to empty g3.
pub fn reference_schedule() -> Vec<ScheduleStep> {
    let mut schedule = class_cleaning();
    schedule.push(ScheduleStep::Repeat {
        times: 100,
        steps: vec![ScheduleStep::Pump(Pump::new(Line::F15, 3e6)), ScheduleStep::Pump(Pump::new(Line::F35, 3e6))],
    });
    schedule.push(ScheduleStep::Repeat {
        times: 100,
        steps: vec![ScheduleStep::Pump(Pump::new(Line::F53, 700e3)), ScheduleStep::Pump(Pump::new(Line::F35, 3e6))],
    });
    schedule
}

/// Filter crystal: a 1 MHz hole burnt at f15.
pub fn filter_schedule() -> Vec<ScheduleStep> {
    vec![ScheduleStep::Pump(Pump::new(Line::F15, 1e6).repeated(200))]
}

/// Absorption depth against probe offset from a carrier line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionSpectrum {
    pub line: Line,
    /// Probe offsets from the line's nominal frequency, Hz.
    pub frequencies: Vec<f64>,
    pub depth: Vec<f64>,
}

impl AbsorptionSpectrum {
    /// Offset and depth of the deepest point with |offset| <= `half_range`.
    pub fn peak_within(&self, half_range: f64) -> (f64, f64) {
        self.frequencies
            .iter()
            .zip(&self.depth)
            .filter(|(f, _)| f.abs() <= half_range)
            .fold((0.0, f64::NEG_INFINITY), |best, (&f, &d)| if d > best.1 { (f, d) } else { best })
    }

    /// Largest depth with |offset| in `[inner, outer]`.
    pub fn max_between(&self, inner: f64, outer: f64) -> f64 {
        self.frequencies
            .iter()
            .zip(&self.depth)
            .filter(|(f, _)| (inner..=outer).contains(&f.abs()))
            .map(|(_, d)| *d)
            .fold(0.0, f64::max)
    }

    /// Full width at half maximum of the peak found by [`Self::peak_within`],
    /// counted in whole grid cells.
    pub fn peak_fwhm(&self, half_range: f64) -> f64 {
        let (_, peak) = self.peak_within(half_range);
        let step = self.frequencies[1] - self.frequencies[0];
        let cells = self
            .frequencies
            .iter()
            .zip(&self.depth)
            .filter(|(f, d)| f.abs() <= half_range && **d >= 0.5 * peak)
            .count();
        cells as f64 * step
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { depth: self.depth.iter().map(|d| d * factor).collect(), ..self.clone() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frequency,d\n");
        for (f, d) in self.frequencies.iter().zip(&self.depth) {
            out.push_str(&format!("{f:e},{d:e}\n"));
        }
        out
    }
}

/// d(nu) = calibration * (total resonant ground population at nu) / (the
/// same for the unprepared medium), optionally convolved with a Lorentzian
/// of FWHM `homogeneous_fwhm`. Probe offsets run over `[lo, hi]` relative
/// to `line` on the population grid.
pub fn absorption_spectrum(
    pop: &SpectralPopulation,
    line: Line,
    range: (f64, f64),
    calibration: f64,
    homogeneous_fwhm: f64,
) -> Result<AbsorptionSpectrum, PrepError> {
    if !(calibration > 0.0) {
        return Err(PrepError::InvalidCalibration);
    }
    let h = &pop.hyperfine;
    let base = h.line_offset(line);
    let n = ((range.1 - range.0) / pop.step).round() as usize + 1;
    let frequencies: Vec<f64> = (0..n).map(|i| range.0 + i as f64 * pop.step).collect();
    let lines: Vec<Line> = Line::all().collect();
    let raw: Vec<f64> = frequencies
        .iter()
        .map(|&f| {
            let nu = base + f;
            lines
                .iter()
                .map(|&l| {
                    let u = nu - h.line_offset(l);
                    let x = (u - pop.start) / pop.step;
                    let i = x.round();
                    if i < 0.0 || i >= pop.cells() as f64 {
                        1.0 / 3.0
                    } else {
                        pop.levels[l.ground.index()][i as usize]
                    }
                })
                .sum::<f64>()
        })
        .collect();
    let unprepared = lines.len() as f64 / 3.0;
    let mut depth: Vec<f64> = raw.iter().map(|r| calibration * r / unprepared).collect();
    if homogeneous_fwhm > 0.0 {
        let half = 0.5 * homogeneous_fwhm;
        let reach = ((20.0 * homogeneous_fwhm) / pop.step).ceil() as isize;
        let kernel: Vec<f64> = (-reach..=reach)
            .map(|k| {
                let x = k as f64 * pop.step;
                half / (x * x + half * half)
            })
            .collect();
        let norm: f64 = kernel.iter().sum();
        let src = depth.clone();
        for (i, d) in depth.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let idx = (i as isize + j as isize - reach).clamp(0, n as isize - 1) as usize;
                acc += k * src[idx];
            }
            *d = acc / norm;
        }
    }
    Ok(AbsorptionSpectrum { line, frequencies, depth })
}

/// Optical-offset profile of the ions left in g1 around f15, for the
/// Monte-Carlo sampler, restricted to `|u| <= half_range`.
pub fn prepared_profile(pop: &SpectralPopulation, half_range: f64) -> Result<SpectralProfile, PrepError> {
    let range = pop
        .cell_range(-half_range, half_range)
        .ok_or(PrepError::WindowOutsideGrid { lo: -half_range, hi: half_range })?;
    let freqs: Vec<f64> = (range.0..range.1).map(|i| pop.offset(i)).collect();
    let values: Vec<f64> = pop.levels[Ground::G1.index()][range.0..range.1].to_vec();
    Ok(SpectralProfile::tabulated_normalized(freqs, values)?)
}

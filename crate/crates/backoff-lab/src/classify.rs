//! Bin taxonomy: many-covered, heavy-covered, weakly exposed and strongly
//! exposed bins, plus bottleneck detection. Everything that can overflow is
//! compared in natural-log space.

use crate::send_sequence::{SendSequence, SequenceError};

const REL_TOL: f64 = 1e-12;

/// Classification constants for a fixed birth rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConstants {
    pub lambda: f64,
    pub c_no: f64,
    pub c_se: f64,
    pub c_upsilon: f64,
    pub c_nb: f64,
    pub c_f: f64,
    pub phi: f64,
    pub chi: f64,
    pub synthetic: bool,
}

impl ClassifierConstants {
    pub fn genuine(lambda: f64) -> Self {
        let c_no = 300.0;
        let c_upsilon = 320.0;
        ClassifierConstants {
            lambda,
            c_no,
            c_se: 10.0 * c_no * ceil_tol(-lambda.ln()),
            c_upsilon,
            c_nb: 1.0 / (30.0 * c_upsilon),
            c_f: 2.0,
            phi: 100.0,
            chi: 1000.0,
            synthetic: false,
        }
    }

    /// Desk-scale overrides: small `C_No`, `C_SE`, `phi`, `chi` and
    /// `C_Upsilon = lambda`, so that every class shows up for `j <= 32`
    /// with moderate weights.
    pub fn synthetic(lambda: f64) -> Self {
        let c_upsilon = lambda;
        ClassifierConstants {
            lambda,
            c_no: 1.0,
            c_se: 1.0,
            c_upsilon,
            c_nb: 1.0 / (30.0 * c_upsilon),
            c_f: 2.0,
            phi: 3.0,
            chi: 3.0,
            synthetic: true,
        }
    }

    pub fn c_0(&self) -> f64 {
        2.0 * self.phi * self.c_f * self.c_upsilon * self.c_no * self.c_no * (6.0 / self.lambda).ln()
            / (self.c_nb * self.lambda)
    }

    /// `L(j) = C_No * ceil(max{ln(1/lambda), C_No ln j})`.
    pub fn l_of(&self, j: f64) -> f64 {
        self.c_no * ceil_tol((-self.lambda.ln()).max(self.c_no * j.ln()))
    }

    /// `LL(j) = C_SE * ceil(max{1, ln ln j})`; small `j` clamp to 1.
    pub fn ll_of(&self, j: f64) -> f64 {
        let lnln = if j > 1.0 { j.ln().ln() } else { f64::NEG_INFINITY };
        self.c_se * ceil_tol(lnln.max(1.0))
    }

    /// `K(i) = 2 ceil(C_Upsilon LL(i) / lambda)`.
    pub fn k_of(&self, i: f64) -> f64 {
        2.0 * ceil_tol(self.c_upsilon * self.ll_of(i) / self.lambda)
    }
}

fn ceil_tol(x: f64) -> f64 {
    (x - REL_TOL * x.abs().max(1.0)).ceil()
}

fn log_ge(a: f64, b: f64) -> bool {
    a >= b - REL_TOL * b.abs().max(1.0)
}

fn lin_ge(a: f64, b: f64) -> bool {
    a >= b * (1.0 - REL_TOL)
}

/// `|{l in [j-1] : ln W_l >= log_threshold}|`.
pub fn upsilon_count(seq: &SendSequence, j: usize, log_threshold: f64) -> Result<usize, SequenceError> {
    let mut n = 0;
    for l in 1..j {
        if log_ge(seq.log_weight(l)?, log_threshold) {
            n += 1;
        }
    }
    Ok(n)
}

/// Members of `Upsilon_{j, >= W}` given `ln W`.
pub fn upsilon_set(seq: &SendSequence, j: usize, log_threshold: f64) -> Result<Vec<usize>, SequenceError> {
    let mut out = Vec::new();
    for l in 1..j {
        if log_ge(seq.log_weight(l)?, log_threshold) {
            out.push(l);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wtilde {
    /// Integer-valued; `+inf` when the maximiser is not representable.
    pub w: f64,
    pub count: usize,
}

impl Wtilde {
    pub fn product(&self) -> f64 {
        self.w * self.count as f64
    }
}

/// Distinct weights of bins `1..j` (descending) with multiplicities.
#[derive(Debug, Clone, Default)]
struct WeightProfile {
    values: Vec<(f64, usize)>,
    total: usize,
}

impl WeightProfile {
    fn insert(&mut self, w: f64) {
        self.total += 1;
        let pos = self.values.partition_point(|(v, _)| *v > w);
        if pos < self.values.len() && self.values[pos].0 == w {
            self.values[pos].1 += 1;
        } else {
            self.values.insert(pos, (w, 1));
        }
    }

    fn count_at_least(&self, w: f64) -> usize {
        self.values
            .iter()
            .take_while(|(v, _)| lin_ge(*v, w))
            .map(|(_, m)| m)
            .sum()
    }

    fn wtilde(&self, required: f64) -> Wtilde {
        if self.total == 0 {
            return Wtilde { w: 1.0, count: 0 };
        }
        let mut best = Wtilde {
            w: 1.0,
            count: self.total,
        };
        let mut acc = 0usize;
        for (v, m) in &self.values {
            acc += m;
            if (acc as f64) < required {
                continue;
            }
            for cand in [(v * (1.0 + REL_TOL)).floor(), v.ceil()] {
                if !(cand >= 1.0) {
                    continue;
                }
                let count = if cand.is_finite() { self.count_at_least(cand) } else { acc };
                if (count as f64) < required {
                    continue;
                }
                let cur = Wtilde { w: cand, count };
                let (pc, pb) = (cur.product(), best.product());
                if pc > pb || (pc == pb && cand > best.w) {
                    best = cur;
                }
            }
        }
        best
    }
}

fn profile(seq: &SendSequence, j: usize) -> Result<WeightProfile, SequenceError> {
    let mut p = WeightProfile::default();
    for l in 1..j {
        p.insert(seq.weight(l)?);
    }
    Ok(p)
}

fn wtilde_requirement(consts: &ClassifierConstants, j: usize) -> f64 {
    ((j - 1) as f64).min(consts.c_upsilon * consts.l_of(j as f64) / consts.lambda)
}

/// The integer `W` maximising `W |Upsilon_{j,>=W}|` subject to
/// `|Upsilon_{j,>=W}| >= min{j-1, C_Upsilon L(j)/lambda}`; ties go to the
/// largest `W`.
pub fn wtilde(seq: &SendSequence, consts: &ClassifierConstants, j: usize) -> Result<Wtilde, SequenceError> {
    assert!(j >= 1, "bins are indexed from 1");
    if j == 1 {
        return Ok(Wtilde { w: 1.0, count: 0 });
    }
    Ok(profile(seq, j)?.wtilde(wtilde_requirement(consts, j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKind {
    ManyCovered,
    HeavyCovered,
    WeaklyExposed,
    StronglyExposed,
}

impl ClassKind {
    pub fn is_covered(self) -> bool {
        matches!(self, ClassKind::ManyCovered | ClassKind::HeavyCovered)
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassKind::ManyCovered => "many_covered",
            ClassKind::HeavyCovered => "heavy_covered",
            ClassKind::WeaklyExposed => "weakly_exposed",
            ClassKind::StronglyExposed => "strongly_exposed",
        }
    }

    pub fn from_props(prop1: bool, prop2: bool, prop3: bool) -> Self {
        if prop1 {
            ClassKind::ManyCovered
        } else if prop2 {
            ClassKind::HeavyCovered
        } else if prop3 {
            ClassKind::WeaklyExposed
        } else {
            ClassKind::StronglyExposed
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinClass {
    pub j: usize,
    pub kind: ClassKind,
    pub prop1: bool,
    pub prop2: bool,
    pub prop3: bool,
    pub wtilde: Wtilde,
    pub log_weight: f64,
    /// `W~ |Upsilon|` was not representable; Prop1 was then taken as true.
    pub overflow: bool,
    /// Whether `ln W_j >= c_NB lambda j / 2` (only meaningful when exposed).
    pub large_weight_bound: bool,
}

fn evaluate(
    consts: &ClassifierConstants,
    j: usize,
    log_w: f64,
    wt: Wtilde,
    heavy: usize,
    very_heavy: usize,
) -> BinClass {
    let jf = j as f64;
    let lhs = consts.c_f.ln() + log_w + consts.phi * jf.ln();
    let rhs = consts.c_nb * consts.lambda * wt.product();
    let overflow = !rhs.is_finite();
    let prop1 = overflow || rhs > 1e4 + lhs || lhs <= rhs;
    let prop2 = heavy as f64 >= consts.c_upsilon * consts.l_of(jf) / (2.0 * consts.lambda);
    let prop3 = very_heavy as f64 >= consts.c_upsilon * consts.ll_of(jf) / consts.lambda;
    let kind = ClassKind::from_props(prop1, prop2, prop3);
    if !kind.is_covered() && j > 1 {
        // Prop1 fails and W~ |Upsilon| >= j - 1, so the weight of bin j must
        // exceed exp(c_NB lambda (j-1)) / (C_F j^phi).
        let implied = consts.c_nb * consts.lambda * (jf - 1.0) - consts.c_f.ln() - consts.phi * jf.ln();
        assert!(
            log_ge(log_w, implied) || log_w >= implied,
            "exposed bin {j} violates the weight bound implied by Prop1"
        );
    }
    BinClass {
        j,
        kind,
        prop1,
        prop2,
        prop3,
        wtilde: wt,
        log_weight: log_w,
        overflow,
        large_weight_bound: log_w >= consts.c_nb * consts.lambda * jf / 2.0,
    }
}

pub fn classify_bin(seq: &SendSequence, consts: &ClassifierConstants, j: usize) -> Result<BinClass, SequenceError> {
    assert!(j >= 1, "bins are indexed from 1");
    let wt = wtilde(seq, consts, j)?;
    let lnj = (j as f64).ln();
    let heavy = upsilon_count(seq, j, 2.0 * lnj)?;
    let very_heavy = upsilon_count(seq, j, consts.chi * lnj)?;
    Ok(evaluate(consts, j, seq.log_weight(j)?, wt, heavy, very_heavy))
}

/// Classifies bins `1..=j_max` incrementally.
pub fn classify_range(
    seq: &SendSequence,
    consts: &ClassifierConstants,
    j_max: usize,
) -> Result<Vec<BinClass>, SequenceError> {
    let mut prof = WeightProfile::default();
    let mut logs: Vec<f64> = Vec::with_capacity(j_max);
    let mut out = Vec::with_capacity(j_max);
    for j in 1..=j_max {
        let wt = if j == 1 {
            Wtilde { w: 1.0, count: 0 }
        } else {
            prof.wtilde(wtilde_requirement(consts, j))
        };
        let lnj = (j as f64).ln();
        let (t2, tchi) = (2.0 * lnj, consts.chi * lnj);
        let heavy = count_sorted(&logs, t2);
        let very_heavy = count_sorted(&logs, tchi);
        let log_w = seq.log_weight(j)?;
        out.push(evaluate(consts, j, log_w, wt, heavy, very_heavy));
        prof.insert(seq.weight(j)?);
        let pos = logs.partition_point(|l| *l < log_w);
        logs.insert(pos, log_w);
    }
    Ok(out)
}

/// Entries of the ascending list `logs` that pass `log_ge(_, threshold)`.
fn count_sorted(logs: &[f64], threshold: f64) -> usize {
    logs.len() - logs.partition_point(|l| !log_ge(*l, threshold))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub flag: bool,
    pub large_weight: bool,
    pub predecessors_light: bool,
    pub witness: Option<usize>,
    /// The scan for a strongly exposed bin was cut short by the search cap.
    pub truncated: bool,
}

/// Bottleneck test for bin `i >= 16`.
pub fn is_bottleneck(
    seq: &SendSequence,
    consts: &ClassifierConstants,
    i: usize,
    search_cap: usize,
) -> Result<Bottleneck, SequenceError> {
    assert!(i >= 16, "bottleneck test needs i >= 16");
    let fi = i as f64;
    let log_wi = seq.log_weight(i)?;
    let large_weight = log_wi >= fi / fi.ln().ln().powi(2).exp();
    let k = consts.k_of(fi);
    let mut predecessors_light = true;
    for l in 1..i {
        if seq.log_weight(l)? > log_wi / (2.0 * k) {
            predecessors_light = false;
            break;
        }
    }
    let mut out = Bottleneck {
        flag: false,
        large_weight,
        predecessors_light,
        witness: None,
        truncated: false,
    };
    if !(large_weight && predecessors_light) {
        return Ok(out);
    }
    let upper = fi * fi.ln().sqrt().exp();
    let upper = if upper >= usize::MAX as f64 { usize::MAX } else { upper.floor() as usize };
    let end = upper.min(search_cap.max(i));
    out.truncated = end < upper;
    for ip in i..=end {
        if classify_bin(seq, consts, ip)?.kind == ClassKind::StronglyExposed {
            out.witness = Some(ip);
            out.flag = true;
            break;
        }
    }
    Ok(out)
}

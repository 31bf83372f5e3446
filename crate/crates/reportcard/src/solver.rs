//! Risk-minimal grade assignment over weak orders.
//!
//! A grading of `n` units is a weak order (an ordered set partition). The
//! objective is assembled from pairwise posterior quantities: for every
//! ordered pair, grading `i` strictly worse than `j` contributes the
//! posterior discordance weight minus `lambda` times the concordance weight,
//! and ties contribute nothing. Exact solutions come from a branch-and-bound
//! over pairwise decisions with transitive-closure propagation; large
//! instances use a multi-restart local search over weak orders. A brute-force
//! enumerator over all weak orders serves as the test oracle, and instances
//! can be exported in LP format for external MILP solvers.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::posterior::PairwiseMatrices;

/// Outcome of the single-pair threshold rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairDecision {
    IWorse,
    JWorse,
    Tie,
}

/// Threshold rule for one pair: a strict ordering requires posterior
/// probability above `1/(1+lambda)`.
pub fn pairwise_threshold(pi_ij: f64, lambda: f64) -> PairDecision {
    let threshold = 1.0 / (1.0 + lambda);
    if pi_ij > threshold {
        PairDecision::IWorse
    } else if 1.0 - pi_ij > threshold {
        PairDecision::JWorse
    } else {
        PairDecision::Tie
    }
}

/// Pairwise objective coefficients for a fixed `lambda`.
///
/// `discord[(i, j)]` is the normalized posterior weight of a discordance when
/// `i` is graded strictly worse than `j`; `concord[(i, j)]` the corresponding
/// concordance weight. The normalizer is `C(n, 2)` for binary loss and
/// `sum m^p_ij` for weighted loss, so reported risks match the risk-function
/// normalization directly.
#[derive(Debug, Clone)]
pub struct RiskSpec {
    pub ids: Vec<String>,
    pub lambda: f64,
    pub exponent: u8,
    n: usize,
    discord: Vec<f64>,
    concord: Vec<f64>,
}

impl RiskSpec {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    fn dw(&self, i: usize, j: usize) -> f64 {
        self.discord[i * self.n + j]
    }

    #[inline]
    fn cw(&self, i: usize, j: usize) -> f64 {
        self.concord[i * self.n + j]
    }

    /// Objective contribution of grading `i` strictly worse than `j`.
    #[inline]
    pub fn cost_worse(&self, i: usize, j: usize) -> f64 {
        self.dw(i, j) - self.lambda * self.cw(i, j)
    }

    /// Lower envelope of the three decisions for an unordered pair.
    #[inline]
    fn pair_floor(&self, i: usize, j: usize) -> f64 {
        self.cost_worse(i, j).min(self.cost_worse(j, i)).min(0.0)
    }

    /// Risk of a grade vector (larger grade = worse).
    pub fn risk_of(&self, grades: &[usize]) -> f64 {
        let mut total = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                if grades[i] > grades[j] {
                    total += self.cost_worse(i, j);
                } else if grades[j] > grades[i] {
                    total += self.cost_worse(j, i);
                }
            }
        }
        total
    }

    /// Discordance rate and expected rank correlation of a grade vector.
    pub fn dr_tau_of(&self, grades: &[usize]) -> (f64, f64) {
        let (mut dr, mut tau) = (0.0, 0.0);
        for i in 0..self.n {
            for j in 0..i {
                let (w, b) = if grades[i] > grades[j] {
                    (i, j)
                } else if grades[j] > grades[i] {
                    (j, i)
                } else {
                    continue;
                };
                dr += self.dw(w, b);
                tau += self.cw(w, b) - self.dw(w, b);
            }
        }
        (dr, tau)
    }

    fn finish(&self, grades: Vec<usize>, multiple_optima: bool) -> GradeAssignment {
        let grades = canonical_grades(&grades);
        let n_grades = grades.iter().copied().max().unwrap_or(0);
        let risk = self.risk_of(&grades);
        let (dr, tau_bar) = self.dr_tau_of(&grades);
        GradeAssignment {
            ids: self.ids.clone(),
            grades,
            n_grades,
            risk,
            dr,
            tau_bar,
            condorcet_rank: None,
            multiple_optima,
        }
    }
}

/// Grades for each unit (consecutive integers starting at 1, larger = worse)
/// plus the achieved risk and its decomposition.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GradeAssignment {
    pub ids: Vec<String>,
    pub grades: Vec<usize>,
    pub n_grades: usize,
    pub risk: f64,
    pub dr: f64,
    pub tau_bar: f64,
    /// Total ranking from the `lambda = 1` solution; 1 = most biased.
    pub condorcet_rank: Option<Vec<usize>>,
    /// Set when the enumeration oracle found another weak order within
    /// 1e-12 of the optimum.
    pub multiple_optima: bool,
}

impl GradeAssignment {
    /// Map grades to star counts under the report polarity: more stars =
    /// less biased.
    pub fn stars(&self) -> Vec<usize> {
        self.grades.iter().map(|g| self.n_grades + 1 - g).collect()
    }
}

/// Relabel grades onto consecutive integers 1..=G preserving order.
fn canonical_grades(grades: &[usize]) -> Vec<usize> {
    let mut levels: Vec<usize> = grades.to_vec();
    levels.sort_unstable();
    levels.dedup();
    grades
        .iter()
        .map(|g| levels.binary_search(g).unwrap() + 1)
        .collect()
}

/// Build the pairwise objective from posterior matrices.
pub fn assemble_objective(matrices: &PairwiseMatrices, lambda: f64) -> RiskSpec {
    let n = matrices.len();
    let pairs = (n * (n - 1) / 2).max(1) as f64;
    let mut discord = vec![0.0; n * n];
    let mut concord = vec![0.0; n * n];
    match matrices.exponent {
        0 => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        discord[i * n + j] = matrices.pi.get(j, i) / pairs;
                        concord[i * n + j] = matrices.pi.get(i, j) / pairs;
                    }
                }
            }
        }
        _ => {
            let mu = matrices
                .mu_p
                .as_ref()
                .expect("weighted objective requires mu_p matrix");
            let m = matrices
                .m_p
                .as_ref()
                .expect("weighted objective requires m_p matrix");
            let mut norm = 0.0;
            for i in 0..n {
                for j in 0..i {
                    norm += m.get(i, j);
                }
            }
            if norm <= 0.0 {
                norm = 1.0;
            }
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        discord[i * n + j] = mu.get(j, i) / norm;
                        concord[i * n + j] = mu.get(i, j) / norm;
                    }
                }
            }
        }
    }
    RiskSpec {
        ids: matrices.ids.clone(),
        lambda,
        exponent: matrices.exponent,
        n,
        discord,
        concord,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveMode {
    Exact,
    Heuristic,
    Auto,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub mode: SolveMode,
    /// Largest `n` solved exactly in `Auto` mode.
    pub exact_limit: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            mode: SolveMode::Auto,
            exact_limit: 12,
            restarts: 50,
            seed: 17,
        }
    }
}

/// Minimize the risk over weak orders.
pub fn solve(spec: &RiskSpec, opts: &SolveOptions) -> GradeAssignment {
    let n = spec.n();
    if n <= 1 {
        return spec.finish(vec![1; n], false);
    }
    let exact = match opts.mode {
        SolveMode::Exact => true,
        SolveMode::Heuristic => false,
        SolveMode::Auto => n <= opts.exact_limit,
    };
    let warm = heuristic_solve(spec, opts);
    if !exact {
        return warm;
    }
    let grades = BranchAndBound::new(spec).run(&warm.grades);
    spec.finish(grades, false)
}

// ---------------------------------------------------------------------------
// branch and bound over pair decisions
// ---------------------------------------------------------------------------

const UNKNOWN: u8 = 0;
const ABOVE: u8 = 1; // first index graded worse
const BELOW: u8 = 2;
const TIE: u8 = 3;

fn mirror(rel: u8) -> u8 {
    match rel {
        ABOVE => BELOW,
        BELOW => ABOVE,
        other => other,
    }
}

/// Composition of relations: given rel(a,b) and rel(b,c), the implied
/// rel(a,c) when determined.
fn compose(ab: u8, bc: u8) -> Option<u8> {
    match (ab, bc) {
        (ABOVE, ABOVE) | (ABOVE, TIE) | (TIE, ABOVE) => Some(ABOVE),
        (BELOW, BELOW) | (BELOW, TIE) | (TIE, BELOW) => Some(BELOW),
        (TIE, TIE) => Some(TIE),
        _ => None,
    }
}

struct BranchAndBound<'a> {
    spec: &'a RiskSpec,
    n: usize,
    rel: Vec<u8>,
    trail: Vec<(usize, usize)>,
    cost_now: f64,
    floor_rest: f64,
    pair_order: Vec<(usize, usize)>,
    best_cost: f64,
    best_grades: Vec<usize>,
}

impl<'a> BranchAndBound<'a> {
    fn new(spec: &'a RiskSpec) -> Self {
        let n = spec.n();
        let mut pair_order = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in 0..i {
                pair_order.push((i, j));
            }
        }
        // most decisive pairs first: stronger propagation and pruning
        pair_order.sort_by(|&(a, b), &(c, d)| {
            let da = (spec.dw(a, b) - spec.dw(b, a)).abs();
            let db = (spec.dw(c, d) - spec.dw(d, c)).abs();
            db.partial_cmp(&da).unwrap_or(std::cmp::Ordering::Equal)
        });
        let floor_rest = pair_order.iter().map(|&(i, j)| spec.pair_floor(i, j)).sum();
        BranchAndBound {
            spec,
            n,
            rel: vec![UNKNOWN; n * n],
            trail: Vec::new(),
            cost_now: 0.0,
            floor_rest,
            pair_order,
            best_cost: f64::INFINITY,
            best_grades: Vec::new(),
        }
    }

    fn get(&self, i: usize, j: usize) -> u8 {
        self.rel[i * self.n + j]
    }

    fn pair_cost(&self, i: usize, j: usize, rel: u8) -> f64 {
        match rel {
            ABOVE => self.spec.cost_worse(i, j),
            BELOW => self.spec.cost_worse(j, i),
            _ => 0.0,
        }
    }

    /// Set rel(i, j) and propagate the transitive closure. Returns false on
    /// conflict. All changes are recorded on the trail.
    fn assign(&mut self, i: usize, j: usize, rel: u8) -> bool {
        let mut queue = vec![(i, j, rel)];
        while let Some((a, b, r)) = queue.pop() {
            let current = self.get(a, b);
            if current != UNKNOWN {
                if current == r {
                    continue;
                }
                return false;
            }
            self.rel[a * self.n + b] = r;
            self.rel[b * self.n + a] = mirror(r);
            self.trail.push((a, b));
            self.cost_now += self.pair_cost(a, b, r);
            self.floor_rest -= self.spec.pair_floor(a, b);
            for c in 0..self.n {
                if c == a || c == b {
                    continue;
                }
                // rel(a,c) from rel(a,b) o rel(b,c)
                let bc = self.get(b, c);
                if bc != UNKNOWN {
                    if let Some(ac) = compose(r, bc) {
                        queue.push((a, c, ac));
                    }
                }
                // rel(c,b) from rel(c,a) o rel(a,b)
                let ca = self.get(c, a);
                if ca != UNKNOWN {
                    if let Some(cb) = compose(ca, r) {
                        queue.push((c, b, cb));
                    }
                }
            }
        }
        true
    }

    fn undo_to(&mut self, mark: usize) {
        while self.trail.len() > mark {
            let (a, b) = self.trail.pop().unwrap();
            let r = self.get(a, b);
            self.cost_now -= self.pair_cost(a, b, r);
            self.floor_rest += self.spec.pair_floor(a, b);
            self.rel[a * self.n + b] = UNKNOWN;
            self.rel[b * self.n + a] = UNKNOWN;
        }
    }

    fn run(mut self, warm_start: &[usize]) -> Vec<usize> {
        self.best_cost = self.spec.risk_of(warm_start);
        self.best_grades = canonical_grades(warm_start);
        self.search(0);
        self.best_grades.clone()
    }

    fn grades_from_rel(&self) -> Vec<usize> {
        // worse-than counts induce the grade levels directly
        let mut grades: Vec<usize> = (0..self.n)
            .map(|i| {
                1 + (0..self.n)
                    .filter(|&j| j != i && self.get(i, j) == ABOVE)
                    .count()
            })
            .collect();
        grades = canonical_grades(&grades);
        grades
    }

    fn search(&mut self, depth: usize) {
        if self.cost_now + self.floor_rest > self.best_cost + 1e-12 {
            return;
        }
        let next = self.pair_order[depth..]
            .iter()
            .position(|&(i, j)| self.get(i, j) == UNKNOWN)
            .map(|off| depth + off);
        let Some(slot) = next else {
            let cost = self.cost_now;
            let grades = self.grades_from_rel();
            if cost < self.best_cost - 1e-12
                || ((cost - self.best_cost).abs() <= 1e-12 && grades < self.best_grades)
            {
                self.best_cost = cost.min(self.best_cost);
                self.best_grades = grades;
            }
            return;
        };
        let (i, j) = self.pair_order[slot];
        let mut options = [
            (ABOVE, self.spec.cost_worse(i, j)),
            (BELOW, self.spec.cost_worse(j, i)),
            (TIE, 0.0),
        ];
        options.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal));
        for (rel, _) in options {
            let mark = self.trail.len();
            if self.assign(i, j, rel) {
                self.search(slot + 1);
            }
            self.undo_to(mark);
        }
    }
}

// ---------------------------------------------------------------------------
// heuristic: threshold/Copeland initialization plus local search
// ---------------------------------------------------------------------------

fn heuristic_solve(spec: &RiskSpec, opts: &SolveOptions) -> GradeAssignment {
    let n = spec.n();
    let restarts = opts.restarts.max(1);
    let starts: Vec<Vec<usize>> = (0..restarts)
        .map(|r| {
            if r == 0 {
                copeland_start(spec)
            } else {
                random_start(spec, opts.seed.wrapping_add(r as u64))
            }
        })
        .collect();
    let solutions = par::map_slice(&starts, |start| {
        let mut grades = start.clone();
        local_search(spec, &mut grades);
        let risk = spec.risk_of(&grades);
        (risk, canonical_grades(&grades))
    });
    let mut best: Option<(f64, Vec<usize>)> = None;
    for (risk, grades) in solutions {
        let better = match &best {
            None => true,
            Some((br, bg)) => {
                risk < br - 1e-12 || ((risk - br).abs() <= 1e-12 && grades < *bg)
            }
        };
        if better {
            best = Some((risk, grades));
        }
    }
    let (_, grades) = best.unwrap_or((0.0, vec![1; n]));
    spec.finish(grades, false)
}

/// Grade by the number of threshold-rule wins; equal counts share a grade.
fn copeland_start(spec: &RiskSpec) -> Vec<usize> {
    let n = spec.n();
    let threshold = 1.0 / (1.0 + spec.lambda);
    let wins: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i && spec.cw(i, j) > threshold * spec.pair_norm(i, j))
                .count()
        })
        .collect();
    canonical_grades(&wins.iter().map(|w| w + 1).collect::<Vec<_>>())
}

impl RiskSpec {
    /// Scale of the pair's total weight, so the threshold rule also applies
    /// to weighted matrices: for p = 0 this is `pi_ij + pi_ji = 1` (up to
    /// the shared normalizer).
    fn pair_norm(&self, i: usize, j: usize) -> f64 {
        self.cw(i, j) + self.dw(i, j)
    }
}

fn random_start(spec: &RiskSpec, seed: u64) -> Vec<usize> {
    let n = spec.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a random weak order: random scores rounded onto a random number of levels
    let levels = rng.gen_range(1..=n);
    (0..n).map(|_| rng.gen_range(1..=levels)).collect()
}

/// First-improvement local search over weak orders with relocate, merge, and
/// split moves. Mutates `grades` into a local optimum.
fn local_search(spec: &RiskSpec, grades: &mut Vec<usize>) {
    let n = spec.n();
    *grades = canonical_grades(grades);
    let mut current = spec.risk_of(grades);
    loop {
        let mut improved = false;
        let n_grades = grades.iter().copied().max().unwrap_or(1);

        // relocate a unit to an adjacent grade or a fresh singleton slot
        for u in 0..n {
            // candidate new positions are encoded on the doubled scale:
            // even = existing grade, odd = between grades
            let mut candidates: Vec<f64> = Vec::new();
            let g = grades[u] as f64;
            candidates.push(g - 1.0);
            candidates.push(g + 1.0);
            candidates.push(g - 0.5);
            candidates.push(g + 0.5);
            candidates.push(0.5);
            candidates.push(n_grades as f64 + 0.5);
            for cand in candidates {
                if cand < 0.5 || cand > n_grades as f64 + 0.5 || cand == g {
                    continue;
                }
                let delta = relocate_delta(spec, grades, u, cand);
                if delta < -1e-13 {
                    apply_relocate(grades, u, cand);
                    *grades = canonical_grades(grades);
                    current += delta;
                    improved = true;
                }
            }
        }

        // merge adjacent grades
        let n_grades = grades.iter().copied().max().unwrap_or(1);
        for g in 1..n_grades {
            let delta = merge_delta(spec, grades, g);
            if delta < -1e-13 {
                for x in grades.iter_mut() {
                    if *x == g + 1 {
                        *x = g;
                    }
                }
                *grades = canonical_grades(grades);
                current += delta;
                improved = true;
            }
        }

        // split one grade along its internal discordance ordering
        let n_grades = grades.iter().copied().max().unwrap_or(1);
        for g in 1..=n_grades {
            if let Some((delta, worse_half)) = best_split(spec, grades, g) {
                if delta < -1e-13 {
                    for &u in &worse_half {
                        grades[u] += 1;
                    }
                    // units in grades above g shift up by one
                    for u in 0..n {
                        if grades[u] > g && !worse_half.contains(&u) {
                            grades[u] += 1;
                        }
                    }
                    *grades = canonical_grades(grades);
                    current += delta;
                    improved = true;
                }
            }
        }

        if !improved {
            break;
        }
    }
    let _ = current;
}

/// Risk change from moving unit `u` to position `pos` on the doubled scale
/// (integer = join that grade, half = new singleton between grades).
fn relocate_delta(spec: &RiskSpec, grades: &[usize], u: usize, pos: f64) -> f64 {
    let mut delta = 0.0;
    let old = grades[u] as f64;
    for v in 0..grades.len() {
        if v == u {
            continue;
        }
        let gv = grades[v] as f64;
        let before = if old > gv {
            spec.cost_worse(u, v)
        } else if gv > old {
            spec.cost_worse(v, u)
        } else {
            0.0
        };
        let after = if pos > gv {
            spec.cost_worse(u, v)
        } else if gv > pos {
            spec.cost_worse(v, u)
        } else {
            0.0
        };
        delta += after - before;
    }
    delta
}

fn apply_relocate(grades: &mut [usize], u: usize, pos: f64) {
    // move to the doubled scale so fractional positions become new levels
    let n = grades.len();
    for v in 0..n {
        grades[v] *= 2;
    }
    grades[u] = (pos * 2.0).round() as usize;
}

fn merge_delta(spec: &RiskSpec, grades: &[usize], g: usize) -> f64 {
    let upper: Vec<usize> = (0..grades.len()).filter(|&u| grades[u] == g + 1).collect();
    let lower: Vec<usize> = (0..grades.len()).filter(|&u| grades[u] == g).collect();
    let mut delta = 0.0;
    for &u in &upper {
        for &v in &lower {
            delta -= spec.cost_worse(u, v);
        }
    }
    delta
}

/// Best single split of grade `g`: members are ordered by their net
/// within-grade discordance and every cut along that order is scored.
fn best_split(spec: &RiskSpec, grades: &[usize], g: usize) -> Option<(f64, Vec<usize>)> {
    let members: Vec<usize> = (0..grades.len()).filter(|&u| grades[u] == g).collect();
    if members.len() < 2 {
        return None;
    }
    let mut scored: Vec<(f64, usize)> = members
        .iter()
        .map(|&u| {
            let score: f64 = members
                .iter()
                .filter(|&&v| v != u)
                .map(|&v| spec.cost_worse(u, v) - spec.cost_worse(v, u))
                .sum();
            (score, u)
        })
        .collect();
    // ascending: cheapest-to-demote units last
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    let mut best: Option<(f64, Vec<usize>)> = None;
    for cut in 1..scored.len() {
        let worse: Vec<usize> = scored[scored.len() - cut..].iter().map(|&(_, u)| u).collect();
        let keep: Vec<usize> = scored[..scored.len() - cut].iter().map(|&(_, u)| u).collect();
        let mut delta = 0.0;
        for &u in &worse {
            for &v in &keep {
                delta += spec.cost_worse(u, v);
            }
        }
        if best.as_ref().map_or(true, |(d, _)| delta < *d) {
            best = Some((delta, worse));
        }
    }
    best
}

// ---------------------------------------------------------------------------
// enumeration oracle
// ---------------------------------------------------------------------------

/// Number of weak orders on `n` labeled elements via the recurrence
/// `a(n) = sum_k C(n, k) a(n - k)`.
pub fn weak_order_count(n: usize) -> u64 {
    let mut a = vec![0u64; n + 1];
    a[0] = 1;
    for m in 1..=n {
        let mut total = 0u64;
        let mut binom = 1u64; // C(m, k)
        for k in 1..=m {
            binom = binom * (m - k + 1) as u64 / k as u64;
            total += binom * a[m - k];
        }
        a[m] = total;
    }
    a[n]
}

/// Visit every weak order of `n` units as a canonical grade vector.
pub fn for_each_weak_order<F: FnMut(&[usize])>(n: usize, mut visit: F) {
    if n == 0 {
        return;
    }
    let mut grades = vec![1usize; n];
    fn recurse<F: FnMut(&[usize])>(grades: &mut Vec<usize>, unit: usize, levels: usize, visit: &mut F) {
        let n = grades.len();
        if unit == n {
            visit(grades);
            return;
        }
        // join an existing level
        for level in 1..=levels {
            grades[unit] = level;
            recurse(grades, unit + 1, levels, visit);
        }
        // open a new level at any position: shift the tail up
        for insert_at in 1..=levels + 1 {
            for g in grades[..unit].iter_mut() {
                if *g >= insert_at {
                    *g += 1;
                }
            }
            grades[unit] = insert_at;
            recurse(grades, unit + 1, levels + 1, visit);
            for g in grades[..unit].iter_mut() {
                if *g > insert_at {
                    *g -= 1;
                }
            }
        }
    }
    // unit 0 always starts at level 1; recursion covers the rest
    recurse(&mut grades, 1, 1, &mut visit);
}

/// Exhaustive minimum over all weak orders. Refuses `n > 9`.
pub fn enumerate_oracle(spec: &RiskSpec) -> Result<GradeAssignment> {
    let n = spec.n();
    if n > 9 {
        return Err(Error::solver(format!(
            "enumeration oracle limited to n <= 9, got {n}"
        )));
    }
    if n == 0 {
        return Ok(spec.finish(Vec::new(), false));
    }
    let mut best_cost = f64::INFINITY;
    let mut best: Vec<usize> = Vec::new();
    let mut ties = false;
    for_each_weak_order(n, |grades| {
        let cost = spec.risk_of(grades);
        if cost < best_cost - 1e-12 {
            best_cost = cost;
            best = grades.to_vec();
            ties = false;
        } else if (cost - best_cost).abs() <= 1e-12 && grades != best.as_slice() {
            ties = true;
            if grades < best.as_slice() {
                best = grades.to_vec();
                best_cost = best_cost.min(cost);
            }
        }
    });
    Ok(spec.finish(best, ties))
}

// ---------------------------------------------------------------------------
// lambda sweep and Condorcet ranks
// ---------------------------------------------------------------------------

/// Solve one assignment per lambda (plus `lambda = 1` for Condorcet ranks,
/// which are attached to every assignment).
pub fn lambda_sweep(
    matrices: &PairwiseMatrices,
    lambdas: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<(f64, GradeAssignment)>> {
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::solver(format!("lambda {l} outside [0, 1]")));
        }
    }
    let mut grid: Vec<f64> = lambdas.to_vec();
    if !grid.iter().any(|&l| l == 1.0) {
        grid.push(1.0);
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let solved: Vec<(f64, GradeAssignment)> = par::map_slice(&grid, |&lambda| {
        let spec = assemble_objective(matrices, lambda);
        (lambda, solve(&spec, opts))
    });
    let condorcet = solved
        .iter()
        .find(|(l, _)| *l == 1.0)
        .map(|(_, a)| condorcet_ranks(a))
        .expect("lambda = 1 present by construction");
    let mut out = solved;
    for (_, a) in out.iter_mut() {
        a.condorcet_rank = Some(condorcet.clone());
    }
    Ok(out)
}

/// Total ranking induced by an assignment: rank 1 = most biased; ties broken
/// by unit id.
pub fn condorcet_ranks(assignment: &GradeAssignment) -> Vec<usize> {
    let n = assignment.grades.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        assignment.grades[b]
            .cmp(&assignment.grades[a])
            .then_with(|| assignment.ids[a].cmp(&assignment.ids[b]))
    });
    let mut ranks = vec![0usize; n];
    for (rank, &u) in order.iter().enumerate() {
        ranks[u] = rank + 1;
    }
    ranks
}

// ---------------------------------------------------------------------------
// LP export
// ---------------------------------------------------------------------------

/// Constraint rows of the transitivity system, shared by the LP writer and
/// by tests. Variables are named `d_i_j` (unit i graded strictly worse than
/// unit j, zero-based indices) and `e_i_j` (tie, i < j).
pub(crate) struct LpRow {
    pub name: String,
    /// (coefficient, variable) terms, `<= rhs` or `= rhs`.
    pub terms: Vec<(f64, String)>,
    pub equality: bool,
    pub rhs: f64,
}

pub(crate) fn lp_constraints(n: usize) -> Vec<LpRow> {
    let d = |i: usize, j: usize| format!("d_{i}_{j}");
    let e = |i: usize, j: usize| {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        format!("e_{a}_{b}")
    };
    let mut rows = Vec::new();
    for i in 0..n {
        for j in 0..i {
            rows.push(LpRow {
                name: format!("part_{j}_{i}"),
                terms: vec![(1.0, d(j, i)), (1.0, d(i, j)), (1.0, e(j, i))],
                equality: true,
                rhs: 1.0,
            });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                // the three cyclic orderings of the triple
                for (a, b, c) in [(i, j, k), (j, k, i), (k, i, j)] {
                    rows.push(LpRow {
                        name: format!("trans_d_{a}_{b}_{c}"),
                        terms: vec![(1.0, d(a, b)), (1.0, d(b, c)), (-1.0, d(a, c))],
                        equality: false,
                        rhs: 1.0,
                    });
                    rows.push(LpRow {
                        name: format!("trans_r_{a}_{b}_{c}"),
                        terms: vec![(1.0, d(a, c)), (-1.0, d(b, c)), (-1.0, d(a, b))],
                        equality: false,
                        rhs: 0.0,
                    });
                    rows.push(LpRow {
                        name: format!("trans_e_{a}_{b}_{c}"),
                        terms: vec![(1.0, e(a, b)), (1.0, e(b, c)), (-1.0, e(a, c))],
                        equality: false,
                        rhs: 1.0,
                    });
                }
            }
        }
    }
    rows
}

/// Write the instance in LP interchange format: binary variables `d_ij`,
/// `d_ji`, `e_ij` per pair, the risk objective, transitivity and partition
/// constraints.
pub fn export_lp(spec: &RiskSpec, path: impl AsRef<Path>) -> Result<()> {
    let n = spec.n();
    let mut text = String::new();
    let _ = writeln!(text, "\\ pairwise grading instance: n={n}, lambda={}, p={}", spec.lambda, spec.exponent);
    let _ = writeln!(text, "\\ variable d_i_j = 1 when unit i is graded strictly worse than unit j");
    text.push_str("Minimize\n obj:");
    let mut first = true;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coef = spec.cost_worse(i, j);
            if coef == 0.0 {
                continue;
            }
            if first {
                let _ = write!(text, " {coef:+.12e} d_{i}_{j}");
                first = false;
            } else {
                let _ = write!(text, " {coef:+.12e} d_{i}_{j}");
            }
        }
    }
    if first {
        text.push_str(" 0");
    }
    text.push_str("\nSubject To\n");
    for row in lp_constraints(n) {
        let _ = write!(text, " {}:", row.name);
        for (coef, var) in &row.terms {
            let _ = write!(text, " {coef:+} {var}");
        }
        let _ = writeln!(text, " {} {}", if row.equality { "=" } else { "<=" }, row.rhs);
    }
    text.push_str("Binary\n");
    for i in 0..n {
        for j in 0..i {
            let _ = writeln!(text, " d_{j}_{i} d_{i}_{j} e_{j}_{i}");
        }
    }
    text.push_str("End\n");
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posterior::SquareMat;
    use approx::assert_abs_diff_eq;

    pub(crate) fn spec_from_pi(pi: &[Vec<f64>], lambda: f64) -> RiskSpec {
        let n = pi.len();
        let mut mat = SquareMat::zeros(n);
        for i in 0..n {
            for j in 0..n {
                mat.set(i, j, pi[i][j]);
            }
        }
        let matrices = PairwiseMatrices {
            ids: (0..n).map(|i| format!("u{i}")).collect(),
            pi: mat,
            mu_p: None,
            m_p: None,
            exponent: 0,
            mc_se: None,
        };
        assemble_objective(&matrices, lambda)
    }

    fn normal_pair_pi(omega: &[f64], sd: f64) -> Vec<Vec<f64>> {
        use statrs::distribution::{ContinuousCDF, Normal};
        let n = omega.len();
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut pi = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    pi[i][j] = std.cdf((omega[i] - omega[j]) / (2.0f64).sqrt() / sd);
                }
            }
        }
        pi
    }

    #[test]
    fn threshold_rule_examples() {
        assert_eq!(pairwise_threshold(0.92, 0.25), PairDecision::IWorse);
        assert_eq!(pairwise_threshold(0.500001, 1.0), PairDecision::IWorse);
        assert_eq!(pairwise_threshold(0.9999, 0.0), PairDecision::Tie);
        assert_eq!(pairwise_threshold(0.08, 0.25), PairDecision::JWorse);
        assert_eq!(pairwise_threshold(0.7, 0.25), PairDecision::Tie);
    }

    #[test]
    fn two_unit_objective_examples() {
        // pi_12 = 1, lambda = 1: ordering 1 above 2 has risk -1 (tau = 1)
        let spec = spec_from_pi(&vec![vec![0.5, 1.0], vec![0.0, 0.5]], 1.0);
        let assignment = solve(&spec, &SolveOptions::default());
        assert_eq!(assignment.n_grades, 2);
        assert!(assignment.grades[0] > assignment.grades[1]);
        assert_abs_diff_eq!(assignment.risk, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(assignment.tau_bar, 1.0, epsilon = 1e-12);

        // pi = 0.5: tie strictly optimal for lambda < 1
        let spec = spec_from_pi(&vec![vec![0.5, 0.5], vec![0.5, 0.5]], 0.9);
        let assignment = solve(&spec, &SolveOptions::default());
        assert_eq!(assignment.n_grades, 1);
        assert_abs_diff_eq!(assignment.risk, 0.0);
    }

    #[test]
    fn lambda_zero_gives_single_grade() {
        let pi = normal_pair_pi(&[2.0, 1.0, 0.0, -0.5], 1.0);
        let spec = spec_from_pi(&pi, 0.0);
        let assignment = solve(&spec, &SolveOptions::default());
        assert_eq!(assignment.n_grades, 1);
        assert_abs_diff_eq!(assignment.risk, 0.0);
        assert_abs_diff_eq!(assignment.dr, 0.0);
    }

    #[test]
    fn example_cycle_is_resolved_transitively() {
        // three units, posterior means (2, 1, 0), unit sds, lambda = 1/4:
        // naive thresholding ties (1,2) and (2,3) but strictly orders (1,3)
        let pi = normal_pair_pi(&[2.0, 1.0, 0.0], 1.0);
        assert_abs_diff_eq!(pi[0][2], 0.9214, epsilon = 5e-4);
        assert_eq!(pairwise_threshold(pi[0][1], 0.25), PairDecision::Tie);
        assert_eq!(pairwise_threshold(pi[1][2], 0.25), PairDecision::Tie);
        assert_eq!(pairwise_threshold(pi[0][2], 0.25), PairDecision::IWorse);

        let spec = spec_from_pi(&pi, 0.25);
        let assignment = solve(&spec, &SolveOptions::default());
        // units 0 and 2 strictly ordered, unit 1 tied with exactly one of them
        assert!(assignment.grades[0] > assignment.grades[2]);
        assert_eq!(assignment.n_grades, 2);
        let oracle = enumerate_oracle(&spec).unwrap();
        assert_abs_diff_eq!(assignment.risk, oracle.risk, epsilon = 1e-12);
        assert!(oracle.multiple_optima); // symmetric instance has two optima
    }

    #[test]
    fn fubini_counts() {
        assert_eq!(weak_order_count(1), 1);
        assert_eq!(weak_order_count(2), 3);
        assert_eq!(weak_order_count(3), 13);
        assert_eq!(weak_order_count(4), 75);
        assert_eq!(weak_order_count(6), 4683);

        for n in 1..=6 {
            let mut count = 0u64;
            let mut seen = std::collections::HashSet::new();
            for_each_weak_order(n, |g| {
                count += 1;
                assert!(seen.insert(g.to_vec()), "duplicate weak order {g:?}");
                let canon = canonical_grades(g);
                assert_eq!(&canon, g, "non-canonical grade vector emitted");
            });
            assert_eq!(count, weak_order_count(n), "n = {n}");
        }
    }

    #[test]
    fn oracle_trivial_cases() {
        let spec = spec_from_pi(&vec![vec![0.5]], 0.5);
        let a = enumerate_oracle(&spec).unwrap();
        assert_eq!(a.grades, vec![1]);

        // n = 3 all-half posteriors: all tied is minimal for lambda < 1
        let pi = vec![vec![0.5; 3], vec![0.5; 3], vec![0.5; 3]];
        let spec = spec_from_pi(&pi, 0.8);
        let a = enumerate_oracle(&spec).unwrap();
        assert_eq!(a.n_grades, 1);

        let spec_big = spec_from_pi(&vec![vec![0.5; 10]; 10], 0.5);
        assert!(enumerate_oracle(&spec_big).is_err());
    }

    #[test]
    fn exact_matches_oracle_on_random_instances() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for n in 2..=6 {
            for _ in 0..25 {
                let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let sd = rng.gen_range(0.5..2.0);
                let pi = normal_pair_pi(&omega, sd);
                let lambda = rng.gen_range(0.0..1.0);
                let spec = spec_from_pi(&pi, lambda);
                let exact = solve(&spec, &SolveOptions::default());
                let oracle = enumerate_oracle(&spec).unwrap();
                assert_abs_diff_eq!(exact.risk, oracle.risk, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn risk_of_every_weak_order_matches_direct_evaluation() {
        // independent risk evaluator over a random 4-unit instance
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let omega: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pi = normal_pair_pi(&omega, 1.0);
        let lambda = 0.3;
        let spec = spec_from_pi(&pi, lambda);
        let pairs = 6.0;
        for_each_weak_order(4, |grades| {
            let mut direct = 0.0;
            for i in 0..4 {
                for j in 0..i {
                    if grades[i] > grades[j] {
                        direct += pi[j][i] - lambda * pi[i][j];
                    } else if grades[j] > grades[i] {
                        direct += pi[i][j] - lambda * pi[j][i];
                    }
                }
            }
            assert_abs_diff_eq!(spec.risk_of(grades), direct / pairs, epsilon = 1e-12);
        });
    }

    #[test]
    fn condorcet_dominant_unit_takes_worst_grade_alone() {
        // lambda-Condorcet criterion on a constructed instance
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(3..8);
            let lambda: f64 = rng.gen_range(0.05..1.0);
            let threshold = 1.0 / (1.0 + lambda);
            let mut pi = vec![vec![0.5; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if i != j && pi[i][j] == 0.5 {
                        let p = rng.gen_range(0.3..0.7);
                        pi[i][j] = p;
                        pi[j][i] = 1.0 - p;
                    }
                }
            }
            for j in 1..n {
                let p = rng.gen_range(threshold + 0.01..0.999);
                pi[0][j] = p;
                pi[j][0] = 1.0 - p;
            }
            let spec = spec_from_pi(&pi, lambda);
            let a = solve(&spec, &SolveOptions::default());
            for j in 1..n {
                assert!(a.grades[0] > a.grades[j], "dominant unit must be strictly worst");
            }
        }
    }

    #[test]
    fn sign_symmetry_reverses_grades() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 6;
        let omega: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pi = normal_pair_pi(&omega, 0.8);
        let mut pi_t = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                pi_t[i][j] = pi[j][i];
            }
        }
        let a = solve(&spec_from_pi(&pi, 0.4), &SolveOptions::default());
        let b = solve(&spec_from_pi(&pi_t, 0.4), &SolveOptions::default());
        let flipped: Vec<usize> = a.grades.iter().map(|g| a.n_grades + 1 - g).collect();
        assert_eq!(canonical_grades(&flipped), b.grades);
        assert_abs_diff_eq!(a.risk, b.risk, epsilon = 1e-12);
    }

    #[test]
    fn lp_export_counts_for_n3() {
        let pi = normal_pair_pi(&[1.0, 0.0, -1.0], 1.0);
        let spec = spec_from_pi(&pi, 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.lp");
        export_lp(&spec, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let binaries: usize = text
            .lines()
            .skip_while(|l| !l.starts_with("Binary"))
            .take_while(|l| !l.starts_with("End"))
            .skip(1)
            .map(|l| l.split_whitespace().count())
            .sum();
        assert_eq!(binaries, 9);
        let constraints = lp_constraints(3);
        assert_eq!(constraints.len(), 3 * 3 + 3);
        assert!(text.contains("Subject To"));
    }

    #[test]
    fn lp_export_n1_is_valid() {
        let spec = spec_from_pi(&vec![vec![0.5]], 0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.lp");
        export_lp(&spec, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with('\\'));
        assert!(text.trim_end().ends_with("End"));
    }

    #[test]
    fn lp_constraints_characterize_weak_orders() {
        // every 0/1 assignment satisfying the constraint system is a weak
        // order; the count matches the Fubini number
        for n in 2..=4usize {
            let rows = lp_constraints(n);
            let mut vars: Vec<String> = Vec::new();
            for i in 0..n {
                for j in 0..i {
                    vars.push(format!("d_{j}_{i}"));
                    vars.push(format!("d_{i}_{j}"));
                    vars.push(format!("e_{j}_{i}"));
                }
            }
            let index = |name: &str| vars.iter().position(|v| v == name).unwrap();
            let mut feasible = 0u64;
            for mask in 0u64..(1 << vars.len()) {
                let value = |name: &str| ((mask >> index(name)) & 1) as f64;
                let ok = rows.iter().all(|row| {
                    let lhs: f64 = row.terms.iter().map(|(c, v)| c * value(v)).sum();
                    if row.equality {
                        (lhs - row.rhs).abs() < 1e-9
                    } else {
                        lhs <= row.rhs + 1e-9
                    }
                });
                if ok {
                    feasible += 1;
                }
            }
            assert_eq!(feasible, weak_order_count(n), "n = {n}");
        }
    }

    #[test]
    fn heuristic_close_to_exact_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let opts = SolveOptions {
            mode: SolveMode::Heuristic,
            ..SolveOptions::default()
        };
        let mut hits = 0;
        for _ in 0..20 {
            let omega: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let pi = normal_pair_pi(&omega, 1.0);
            let lambda = rng.gen_range(0.1..0.9);
            let spec = spec_from_pi(&pi, lambda);
            let heur = solve(&spec, &opts);
            let oracle = enumerate_oracle(&spec).unwrap();
            if (heur.risk - oracle.risk).abs() < 1e-9 {
                hits += 1;
            }
        }
        assert!(hits >= 19, "heuristic matched oracle on {hits}/20");
    }

    #[test]
    fn condorcet_rank_orders_by_grade_then_id() {
        let spec = spec_from_pi(&normal_pair_pi(&[1.0, 0.0, 2.0], 1.0), 1.0);
        let a = solve(&spec, &SolveOptions::default());
        let ranks = condorcet_ranks(&a);
        // unit 2 most biased, then 0, then 1
        assert_eq!(ranks, vec![2, 3, 1]);
    }

    #[test]
    fn stars_reverse_polarity() {
        let spec = spec_from_pi(&normal_pair_pi(&[2.0, 0.0], 1.0), 1.0);
        let a = solve(&spec, &SolveOptions::default());
        assert_eq!(a.grades, vec![2, 1]);
        assert_eq!(a.stars(), vec![1, 2]);
    }
}

//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use sopa_morph::sopa::PatternParams;

/// Scalar log-sigmoid written out directly.
pub fn log_sig(x: f64) -> f64 {
    if x >= 0.0 {
        -(1.0 + (-x).exp()).ln()
    } else {
        x - (1.0 + x.exp()).ln()
    }
}

/// Arc scores recomputed one scalar at a time.
pub struct ScalarArcs {
    pub main: Vec<Vec<f64>>,
    pub self_loop: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
}

pub fn scalar_arcs(params: &PatternParams, emb: &[Vec<f64>]) -> ScalarArcs {
    let arcs = params.main_w.ncols();
    let d = params.main_w.nrows();
    let dot = |w: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>, x: &[f64], a: usize| {
        let mut s = b[[0, a]];
        for i in 0..d {
            s += x[i] * w[[i, a]];
        }
        log_sig(s)
    };
    ScalarArcs {
        main: emb.iter().map(|x| (0..arcs).map(|a| dot(&params.main_w, &params.main_b, x, a)).collect()).collect(),
        self_loop: emb.iter().map(|x| (0..arcs).map(|a| dot(&params.self_w, &params.self_b, x, a)).collect()).collect(),
        eps: (0..arcs).map(|a| log_sig(params.eps[[0, a]])).collect(),
    }
}

/// Exhaustive path enumeration for one pattern of size `k` whose arcs start
/// at column `offset`. Returns, for each end position `t`, the best score of a
/// path consuming at least one character and whose last consumed character
/// is `t` (`-inf` when none exists). With `eps_before_main`, an epsilon must
/// be followed directly by a main transition.
pub fn enumerate_pattern(arcs: &ScalarArcs, k: usize, offset: usize, eps_before_main: bool) -> Vec<f64> {
    let n = arcs.main.len();
    let mut best = vec![f64::NEG_INFINITY; n];

    #[allow(clippy::too_many_arguments)]
    fn walk(
        arcs: &ScalarArcs,
        k: usize,
        offset: usize,
        strict: bool,
        state: usize,
        pos: usize,
        score: f64,
        consumed: usize,
        pending_eps: bool,
        best: &mut [f64],
    ) {
        let n = arcs.main.len();
        if state == k - 1 {
            if consumed > 0 && !(strict && pending_eps) && score > best[pos - 1] {
                best[pos - 1] = score;
            }
            return;
        }
        let col = offset + state;
        if pos < n && !(strict && pending_eps) {
            walk(arcs, k, offset, strict, state, pos + 1, score + arcs.self_loop[pos][col], consumed + 1, false, best);
        }
        if pos < n {
            walk(arcs, k, offset, strict, state + 1, pos + 1, score + arcs.main[pos][col], consumed + 1, false, best);
        }
        if !(strict && pending_eps) {
            walk(arcs, k, offset, strict, state + 1, pos, score + arcs.eps[col], consumed, true, best);
        }
    }

    for start in 0..n {
        walk(arcs, k, offset, eps_before_main, 0, start, 0.0, 0, false, &mut best);
    }
    best
}

/// Straight-line generalized Jaccard over half-open spans.
pub fn span_jaccard(a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    let lo = a.0.min(b.0);
    let hi = a.1.max(b.1);
    for pos in lo..hi {
        let in_a = pos >= a.0 && pos < a.1;
        let in_b = pos >= b.0 && pos < b.1;
        if in_a && in_b {
            inter += 1;
        }
        if in_a || in_b {
            union += 1;
        }
    }
    inter as f64 / union as f64
}

/// Bidirectional mean of row and column maxima, written out longhand.
pub fn sample_similarity_longhand(p1: &[(usize, usize)], p2: &[(usize, usize)]) -> f64 {
    let t = p1.len() as f64;
    let mut forward = 0.0;
    for &a in p1 {
        let mut m = 0.0f64;
        for &b in p2 {
            m = m.max(span_jaccard(a, b));
        }
        forward += m;
    }
    let mut backward = 0.0;
    for &b in p2 {
        let mut m = 0.0f64;
        for &a in p1 {
            m = m.max(span_jaccard(a, b));
        }
        backward += m;
    }
    (forward + backward) / (2.0 * t)
}

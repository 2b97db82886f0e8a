//! Box geometry and optimal linear assignment.

use std::cmp::Ordering;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// Axis-aligned box in normalized image coordinates, center format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// From top-left corner plus size.
    pub fn from_tlwh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            cx: x + w / 2.0,
            cy: y + h / 2.0,
            w,
            h,
        }
    }

    pub fn x1(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn x2(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y2(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| v.is_finite())
            && self.w >= 0.0
            && self.h >= 0.0
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1() && x <= self.x2() && y >= self.y1() && y <= self.y2()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = iw * ih;
    // Corner-derived areas so that iou(b, b) is exactly 1.
    let corner_area = |b: &BBox| (b.x2() - b.x1()).max(0.0) * (b.y2() - b.y1()).max(0.0);
    let union = corner_area(a) + corner_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Dense cost matrix whose entries may be marked infeasible.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Option<f64>>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Option<f64>>) -> Self {
        assert_eq!(entries.len(), rows * cols, "cost matrix size mismatch");
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> Option<f64>,
    ) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn dense(rows: usize, cols: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), rows * cols, "cost matrix size mismatch");
        Self {
            rows,
            cols,
            entries: values.iter().map(|&v| Some(v)).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.cols + j]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentResult {
    /// Matched `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total_cost: f64,
}

/// Optimal assignment over feasible entries.
///
/// The matching first maximizes the number of pairs (it has size
/// `min(m, n)` unless infeasible entries prevent that), then minimizes the
/// summed cost (maximizes it when `maximize`). Among equal optima the
/// lexicographically smallest pair list is returned.
pub fn linear_assignment(cost: &CostMatrix, maximize: bool) -> AssignmentResult {
    let (m, n) = (cost.rows, cost.cols);
    if m == 0 || n == 0 {
        return AssignmentResult {
            pairs: vec![],
            unmatched_rows: (0..m).collect(),
            unmatched_cols: (0..n).collect(),
            total_cost: 0.0,
        };
    }
    let sign = if maximize { -1.0 } else { 1.0 };
    let signed = |i: usize, j: usize| cost.get(i, j).map(|c| sign * c);

    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..n).collect();
    let best = solve_subproblem(&signed, &all_rows, &all_cols);
    let tol = 1e-10 * (1.0 + best.cost.abs());

    // Walk rows in order, fixing each to the smallest column that still
    // admits an optimal completion.
    let mut pairs = Vec::with_capacity(best.pairs.len());
    let mut fixed_count = 0usize;
    let mut fixed_cost = 0.0;
    let mut col_used = vec![false; n];
    for i in 0..m {
        let rest_rows: Vec<usize> = (i + 1..m).collect();
        for j in 0..n {
            if col_used[j] {
                continue;
            }
            let Some(c) = signed(i, j) else { continue };
            let rest_cols: Vec<usize> = (0..n).filter(|&k| !col_used[k] && k != j).collect();
            let sub = solve_subproblem(&signed, &rest_rows, &rest_cols);
            let count = fixed_count + 1 + sub.pairs.len();
            let total = fixed_cost + c + sub.cost;
            if count == best.pairs.len() && (total - best.cost).abs() <= tol {
                pairs.push((i, j));
                col_used[j] = true;
                fixed_count += 1;
                fixed_cost += c;
                break;
            }
        }
        if fixed_count == best.pairs.len() {
            break;
        }
    }

    let mut row_used = vec![false; m];
    for &(i, _) in &pairs {
        row_used[i] = true;
    }
    let total_cost = pairs.iter().map(|&(i, j)| cost.get(i, j).unwrap()).sum();
    AssignmentResult {
        unmatched_rows: (0..m).filter(|&i| !row_used[i]).collect(),
        unmatched_cols: (0..n).filter(|&j| !col_used[j]).collect(),
        pairs,
        total_cost,
    }
}

struct SubSolution {
    pairs: Vec<(usize, usize)>,
    cost: f64,
}

/// Max-cardinality, min-cost matching restricted to the given rows/cols.
fn solve_subproblem(
    cost: &impl Fn(usize, usize) -> Option<f64>,
    rows: &[usize],
    cols: &[usize],
) -> SubSolution {
    if rows.is_empty() || cols.is_empty() {
        return SubSolution {
            pairs: vec![],
            cost: 0.0,
        };
    }
    let transposed = rows.len() > cols.len();
    let (a, b) = if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let entry = |x: usize, y: usize| -> Lex {
        let c = if transposed {
            cost(b[y], a[x])
        } else {
            cost(a[x], b[y])
        };
        match c {
            Some(v) => Lex(0, v),
            None => Lex(1, 0.0),
        }
    };
    let assignment = hungarian(a.len(), b.len(), entry);
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (x, y) in assignment.into_iter().enumerate() {
        let (r, c) = if transposed {
            (b[y], a[x])
        } else {
            (a[x], b[y])
        };
        if let Some(v) = cost(r, c) {
            pairs.push((r, c));
            total += v;
        }
    }
    pairs.sort_unstable();
    // Recompute in row order so equal pair sets give identical sums.
    let cost_sum = pairs.iter().map(|&(r, c)| cost(r, c).unwrap()).sum::<f64>();
    debug_assert!((cost_sum - total).abs() <= 1e-9 * (1.0 + total.abs()));
    SubSolution {
        pairs,
        cost: cost_sum,
    }
}

/// Lexicographic cost: (number of infeasible entries used, summed cost).
#[derive(Clone, Copy, Debug, PartialEq)]
struct Lex(i64, f64);

const LEX_INF: Lex = Lex(i64::MAX / 4, 0.0);

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex(self.0 + o.0, self.1 + o.1)
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex(self.0 - o.0, self.1 - o.1)
    }
}

impl PartialOrd for Lex {
    fn partial_cmp(&self, o: &Lex) -> Option<Ordering> {
        Some(self.0.cmp(&o.0).then(self.1.total_cmp(&o.1)))
    }
}

/// Shortest-augmenting-path Hungarian method for `n <= m`; returns the
/// column assigned to each row.
fn hungarian(n: usize, m: usize, a: impl Fn(usize, usize) -> Lex) -> Vec<usize> {
    debug_assert!(n <= m);
    let zero = Lex(0, 0.0);
    let mut u = vec![zero; n + 1];
    let mut v = vec![zero; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![LEX_INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = LEX_INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] = u[p[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

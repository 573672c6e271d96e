//! Model formulas (`weight ~ tw + grp + tw:grp3`) and treatment-coded
//! fixed-effects design matrices.
//!
//! Grammar: `response '~' term ('+' term)*` where a term is `name`,
//! `name ':' name` or `name '*' name`. `a*b` expands to `a + b + a:b`.
//! The intercept is always present and always the first column.
//!
//! Recognised variables on a long body-weight table:
//! - `tw`: week, numeric
//! - `grp`: treatment group, categorical; the lowest label is the reference
//! - `grp<k>`: 0/1 indicator for group `k`

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{LongDataset, WEEK_COLUMN, WEIGHT_COLUMN};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("unknown operator `{op}` at byte {offset}")]
    UnknownOperator { offset: usize, op: char },
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("design matrix is rank deficient (rank {rank} < {columns} columns)")]
    RankDeficient { rank: usize, columns: usize },
    #[error("no observations")]
    Empty,
}

pub type Result<T> = std::result::Result<T, FormulaError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Term {
    Intercept,
    Main(String),
    Interaction(String, String),
}

impl Term {
    fn same_as(&self, other: &Term) -> bool {
        match (self, other) {
            (Term::Interaction(a, b), Term::Interaction(c, d)) => {
                (a == c && b == d) || (a == d && b == c)
            }
            _ => self == other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormulaAst {
    pub response: String,
    pub terms: Vec<Term>,
}

impl fmt::Display for FormulaAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rhs: Vec<String> = self
            .terms
            .iter()
            .filter_map(|t| match t {
                Term::Intercept => None,
                Term::Main(a) => Some(a.clone()),
                Term::Interaction(a, b) => Some(format!("{a}:{b}")),
            })
            .collect();
        if rhs.is_empty() {
            write!(f, "{} ~ 1", self.response)
        } else {
            write!(f, "{} ~ {}", self.response, rhs.join(" + "))
        }
    }
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn err(&self, message: &str) -> FormulaError {
        FormulaError::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn name(&mut self, what: &str) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            Some(c) if is_operator(c) => {
                return Err(FormulaError::UnknownOperator {
                    offset: self.pos,
                    op: c,
                })
            }
            Some(_) => return Err(self.err(&format!("expected {what}"))),
            None => return Err(self.err(&format!("expected {what}, found end of input"))),
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(self.src[start..self.pos].to_string())
    }
}

fn is_operator(c: char) -> bool {
    matches!(
        c,
        '-' | '/'
            | '^'
            | '|'
            | '('
            | ')'
            | '%'
            | '='
            | '!'
            | '@'
            | '$'
            | '&'
            | '['
            | ']'
            | '{'
            | '}'
    )
}

pub fn parse_formula(text: &str) -> Result<FormulaAst> {
    let mut cur = Cursor { src: text, pos: 0 };
    let response = cur.name("response name")?;
    cur.skip_ws();
    match cur.peek() {
        Some('~') => cur.pos += 1,
        Some(c) if is_operator(c) => {
            return Err(FormulaError::UnknownOperator {
                offset: cur.pos,
                op: c,
            })
        }
        _ => return Err(cur.err("expected `~`")),
    }
    cur.skip_ws();
    if cur.peek().is_none() {
        return Err(cur.err("empty right-hand side"));
    }

    let mut terms = vec![Term::Intercept];
    let mut push = |t: Term| {
        if !terms.iter().any(|e| e.same_as(&t)) {
            terms.push(t);
        }
    };
    loop {
        cur.skip_ws();
        if cur.src[cur.pos..].starts_with('1') {
            // explicit intercept; it is always present
            cur.pos += 1;
        } else {
            let a = cur.name("term")?;
            cur.skip_ws();
            match cur.peek() {
                Some(':') => {
                    cur.pos += 1;
                    let b = cur.name("variable after `:`")?;
                    push(Term::Interaction(a, b));
                }
                Some('*') => {
                    cur.pos += 1;
                    let b = cur.name("variable after `*`")?;
                    push(Term::Main(a.clone()));
                    push(Term::Main(b.clone()));
                    push(Term::Interaction(a, b));
                }
                _ => push(Term::Main(a)),
            }
        }
        cur.skip_ws();
        match cur.peek() {
            None => break,
            Some('+') => {
                cur.pos += 1;
                cur.skip_ws();
                if cur.peek().is_none() {
                    return Err(cur.err("empty term after `+`"));
                }
            }
            Some(c) if is_operator(c) || c == '~' => {
                return Err(FormulaError::UnknownOperator {
                    offset: cur.pos,
                    op: c,
                })
            }
            Some(_) => return Err(cur.err("expected `+` or end of formula")),
        }
    }
    Ok(FormulaAst { response, terms })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnScope {
    /// Constant within every mouse.
    Outer,
    /// Varies within at least one mouse.
    Inner,
}

#[derive(Debug, Clone)]
pub struct Cluster {
    pub mouse_id: String,
    pub group: u32,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub t: Vec<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DesignSet {
    pub column_names: Vec<String>,
    pub column_scope: Vec<ColumnScope>,
    pub clusters: Vec<Cluster>,
    pub group_levels: Vec<u32>,
}

impl DesignSet {
    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Stacks all clusters into one matrix and response, in cluster order.
    pub fn pooled(&self) -> (DMatrix<f64>, DVector<f64>) {
        let (n, p) = (self.n_obs(), self.n_cols());
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut row = 0;
        for c in &self.clusters {
            x.rows_mut(row, c.len()).copy_from(&c.x);
            y.rows_mut(row, c.len()).copy_from(&c.y);
            row += c.len();
        }
        (x, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Variable {
    Week,
    Group,
    Indicator(u32),
}

/// Maps `(group, week)` to a design row for a given formula and set of
/// group levels. Used both for building designs and for contrast vectors.
#[derive(Debug, Clone)]
pub struct RowBuilder {
    terms: Vec<Vec<Variable>>,
    column_names: Vec<String>,
    levels: Vec<u32>,
}

impl RowBuilder {
    pub fn new(ast: &FormulaAst, levels: &[u32]) -> Result<Self> {
        if ast.response != WEIGHT_COLUMN {
            return Err(FormulaError::UnknownVariable(ast.response.clone()));
        }
        let resolve = |name: &str| -> Result<Variable> {
            if name == WEEK_COLUMN {
                return Ok(Variable::Week);
            }
            if name == "grp" {
                return Ok(Variable::Group);
            }
            name.strip_prefix("grp")
                .and_then(|k| k.parse::<u32>().ok())
                .filter(|k| levels.contains(k))
                .map(Variable::Indicator)
                .ok_or_else(|| FormulaError::UnknownVariable(name.to_string()))
        };
        let mut terms = Vec::new();
        for t in &ast.terms {
            terms.push(match t {
                Term::Intercept => vec![],
                Term::Main(a) => vec![resolve(a)?],
                Term::Interaction(a, b) => vec![resolve(a)?, resolve(b)?],
            });
        }
        let mut b = Self {
            terms,
            column_names: vec![],
            levels: levels.to_vec(),
        };
        b.column_names = b.expand(0, 0.0).into_iter().map(|c| c.0).collect();
        Ok(b)
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    fn variable_columns(&self, v: &Variable, group: u32, week: f64) -> Vec<(String, f64)> {
        let ind = |k: u32| if group == k { 1.0 } else { 0.0 };
        match v {
            Variable::Week => vec![(WEEK_COLUMN.to_string(), week)],
            Variable::Group => self
                .levels
                .iter()
                .skip(1)
                .map(|&k| (format!("grp{k}"), ind(k)))
                .collect(),
            Variable::Indicator(k) => vec![(format!("grp{k}"), ind(*k))],
        }
    }

    fn expand(&self, group: u32, week: f64) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for vars in &self.terms {
            match vars.as_slice() {
                [] => out.push(("(Intercept)".to_string(), 1.0)),
                [a] => out.extend(self.variable_columns(a, group, week)),
                [a, b] => {
                    for (na, va) in self.variable_columns(a, group, week) {
                        for (nb, vb) in self.variable_columns(b, group, week) {
                            out.push((format!("{na}:{nb}"), va * vb));
                        }
                    }
                }
                _ => unreachable!("terms have at most two factors"),
            }
        }
        out
    }

    pub fn row(&self, group: u32, week: f64) -> Vec<f64> {
        self.expand(group, week).into_iter().map(|c| c.1).collect()
    }
}

pub fn build_design(ast: &FormulaAst, d: &LongDataset) -> Result<DesignSet> {
    if d.n_obs() == 0 {
        return Err(FormulaError::Empty);
    }
    let levels = d.group_levels();
    let builder = RowBuilder::new(ast, &levels)?;
    let p = builder.column_names().len();

    let clusters: Vec<Cluster> = d
        .by_mouse()
        .into_iter()
        .map(|recs| {
            let n = recs.len();
            let mut x = DMatrix::zeros(n, p);
            for (i, r) in recs.iter().enumerate() {
                let row = builder.row(r.group, f64::from(r.tw));
                for (j, v) in row.into_iter().enumerate() {
                    x[(i, j)] = v;
                }
            }
            Cluster {
                mouse_id: recs[0].mouse_id.clone(),
                group: recs[0].group,
                y: DVector::from_iterator(n, recs.iter().map(|r| r.weight)),
                x,
                t: recs.iter().map(|r| f64::from(r.tw)).collect(),
            }
        })
        .collect();

    let column_scope = (0..p)
        .map(|j| {
            let constant = clusters.iter().all(|c| {
                let col = c.x.column(j);
                col.iter().all(|&v| v == col[0])
            });
            if constant {
                ColumnScope::Outer
            } else {
                ColumnScope::Inner
            }
        })
        .collect();

    let ds = DesignSet {
        column_names: builder.column_names().to_vec(),
        column_scope,
        clusters,
        group_levels: levels,
    };
    let rank = pooled_rank(&ds.pooled().0);
    if rank < p {
        return Err(FormulaError::RankDeficient { rank, columns: p });
    }
    Ok(ds)
}

fn pooled_rank(x: &DMatrix<f64>) -> usize {
    if x.nrows() < x.ncols() {
        return x.nrows();
    }
    let r = x.clone().col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .collect();
    let largest = diag.iter().copied().fold(0.0, f64::max);
    diag.iter().filter(|&&v| v > RANK_TOL * largest).count()
}

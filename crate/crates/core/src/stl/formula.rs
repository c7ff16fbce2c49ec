use std::fmt;

use serde::{Deserialize, Serialize};

use super::StlError;

/// Trace channel an atom reads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Signal {
    Cgm,
    Iob,
    Y,
    Z,
    U,
    S,
    /// Fraction of samples below 70 mg/dl in the forward window `[t, t + window]`.
    Tbr {
        window: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Comparator {
    fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
        }
    }

    /// Signed margin of `x cmp c`.
    pub fn margin(self, x: f64, c: f64) -> f64 {
        match self {
            Comparator::Gt | Comparator::Ge => x - c,
            Comparator::Lt | Comparator::Le => c - x,
        }
    }

    pub fn holds(self, x: f64, c: f64) -> bool {
        match self {
            Comparator::Lt => x < c,
            Comparator::Le => x <= c,
            Comparator::Gt => x > c,
            Comparator::Ge => x >= c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StlFormula {
    Atom {
        signal: Signal,
        cmp: Comparator,
        threshold: f64,
    },
    Not(Box<StlFormula>),
    And(Box<StlFormula>, Box<StlFormula>),
    Or(Box<StlFormula>, Box<StlFormula>),
    Globally {
        a: f64,
        b: f64,
        body: Box<StlFormula>,
    },
    Eventually {
        a: f64,
        b: f64,
        body: Box<StlFormula>,
    },
}

impl StlFormula {
    pub fn atom(signal: Signal, cmp: Comparator, threshold: f64) -> Self {
        StlFormula::Atom {
            signal,
            cmp,
            threshold,
        }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: StlFormula) -> Self {
        StlFormula::Not(Box::new(f))
    }

    pub fn and(f: StlFormula, g: StlFormula) -> Self {
        StlFormula::And(Box::new(f), Box::new(g))
    }

    pub fn or(f: StlFormula, g: StlFormula) -> Self {
        StlFormula::Or(Box::new(f), Box::new(g))
    }

    pub fn globally(a: f64, b: f64, f: StlFormula) -> Self {
        StlFormula::Globally {
            a,
            b,
            body: Box::new(f),
        }
    }

    pub fn eventually(a: f64, b: f64, f: StlFormula) -> Self {
        StlFormula::Eventually {
            a,
            b,
            body: Box::new(f),
        }
    }

    /// `G_[0, span - window] (tbr_window < 0.04)`.
    pub fn ada(span: f64, window: f64) -> Self {
        Self::globally(
            0.0,
            (span - window).max(0.0),
            Self::atom(Signal::Tbr { window }, Comparator::Lt, super::ADA_TBR_LIMIT),
        )
    }

    pub fn depth(&self) -> usize {
        match self {
            StlFormula::Atom { .. } => 1,
            StlFormula::Not(f) => 1 + f.depth(),
            StlFormula::And(f, g) | StlFormula::Or(f, g) => 1 + f.depth().max(g.depth()),
            StlFormula::Globally { body, .. } | StlFormula::Eventually { body, .. } => {
                1 + body.depth()
            }
        }
    }

    /// Furthest look-ahead in minutes.
    pub fn horizon(&self) -> f64 {
        match self {
            StlFormula::Atom { signal, .. } => match signal {
                Signal::Tbr { window } => *window,
                _ => 0.0,
            },
            StlFormula::Not(f) => f.horizon(),
            StlFormula::And(f, g) | StlFormula::Or(f, g) => f.horizon().max(g.horizon()),
            StlFormula::Globally { b, body, .. } | StlFormula::Eventually { b, body, .. } => {
                b + body.horizon()
            }
        }
    }

    pub fn validate(&self) -> Result<(), StlError> {
        match self {
            StlFormula::Atom {
                signal, threshold, ..
            } => {
                if !threshold.is_finite() {
                    return Err(StlError::InvalidFormula(format!(
                        "non-finite threshold {threshold}"
                    )));
                }
                if let Signal::Tbr { window } = signal {
                    if !(window.is_finite() && *window >= 0.0) {
                        return Err(StlError::InvalidFormula(format!(
                            "tbr window must be >= 0 (got {window})"
                        )));
                    }
                }
                Ok(())
            }
            StlFormula::Not(f) => f.validate(),
            StlFormula::And(f, g) | StlFormula::Or(f, g) => {
                f.validate()?;
                g.validate()
            }
            StlFormula::Globally { a, b, body } | StlFormula::Eventually { a, b, body } => {
                if !(a.is_finite() && b.is_finite() && *a >= 0.0 && a <= b) {
                    return Err(StlError::InvalidFormula(format!(
                        "interval [{a}, {b}] must satisfy 0 <= a <= b"
                    )));
                }
                body.validate()
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self, StlError> {
        let mut p = Parser { src: text, pos: 0 };
        let f = p.formula()?;
        p.skip_ws();
        if p.pos < text.len() {
            return Err(p.error("trailing input after formula"));
        }
        f.validate().map_err(|e| StlError::Parse {
            pos: 0,
            message: e.to_string(),
        })?;
        Ok(f)
    }
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signal::Cgm => f.write_str("cgm"),
            Signal::Iob => f.write_str("iob"),
            Signal::Y => f.write_str("y"),
            Signal::Z => f.write_str("z"),
            Signal::U => f.write_str("u"),
            Signal::S => f.write_str("s"),
            Signal::Tbr { window } => write!(f, "(tbr {window})"),
        }
    }
}

impl fmt::Display for StlFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StlFormula::Atom {
                signal,
                cmp,
                threshold,
            } => write!(f, "({} {signal} {threshold})", cmp.symbol()),
            StlFormula::Not(g) => write!(f, "(not {g})"),
            StlFormula::And(g, h) => write!(f, "(and {g} {h})"),
            StlFormula::Or(g, h) => write!(f, "(or {g} {h})"),
            StlFormula::Globally { a, b, body } => write!(f, "(G {a} {b} {body})"),
            StlFormula::Eventually { a, b, body } => write!(f, "(F {a} {b} {body})"),
        }
    }
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> StlError {
        StlError::Parse {
            pos: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn expect(&mut self, c: char) -> Result<(), StlError> {
        self.skip_ws();
        match self.peek() {
            Some(got) if got == c => {
                self.pos += c.len_utf8();
                Ok(())
            }
            Some(got) => Err(self.error(format!("expected `{c}`, found `{got}`"))),
            None => Err(self.error(format!("expected `{c}`, found end of input"))),
        }
    }

    fn token(&mut self) -> Result<(usize, String), StlError> {
        self.skip_ws();
        let start = self.pos;
        let rest = &self.src[start..];
        let len = rest
            .find(|c: char| c.is_whitespace() || c == '(' || c == ')')
            .unwrap_or(rest.len());
        if len == 0 {
            return Err(match self.peek() {
                Some(c) => self.error(format!("expected a token, found `{c}`")),
                None => self.error("unexpected end of input"),
            });
        }
        self.pos += len;
        Ok((start, self.src[start..start + len].to_string()))
    }

    fn number(&mut self) -> Result<f64, StlError> {
        let (at, tok) = self.token()?;
        tok.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or(StlError::Parse {
                pos: at,
                message: format!("expected a number, found `{tok}`"),
            })
    }

    fn signal(&mut self) -> Result<Signal, StlError> {
        self.skip_ws();
        if self.peek() == Some('(') {
            self.pos += 1;
            let (at, head) = self.token()?;
            if head != "tbr" {
                return Err(StlError::Parse {
                    pos: at,
                    message: format!("unknown derived signal `{head}`"),
                });
            }
            let window = self.number()?;
            self.expect(')')?;
            return Ok(Signal::Tbr { window });
        }
        let (at, name) = self.token()?;
        Ok(match name.as_str() {
            "cgm" | "glucose" => Signal::Cgm,
            "iob" => Signal::Iob,
            "y" => Signal::Y,
            "z" => Signal::Z,
            "u" => Signal::U,
            "s" => Signal::S,
            other => {
                return Err(StlError::Parse {
                    pos: at,
                    message: format!("unknown signal `{other}`"),
                })
            }
        })
    }

    fn formula(&mut self) -> Result<StlFormula, StlError> {
        self.expect('(')?;
        let (at, head) = self.token()?;
        let f = match head.as_str() {
            "<" | "<=" | ">" | ">=" => {
                let cmp = match head.as_str() {
                    "<" => Comparator::Lt,
                    "<=" => Comparator::Le,
                    ">" => Comparator::Gt,
                    _ => Comparator::Ge,
                };
                let signal = self.signal()?;
                let threshold = self.number()?;
                StlFormula::Atom {
                    signal,
                    cmp,
                    threshold,
                }
            }
            "not" => StlFormula::not(self.formula()?),
            "and" | "or" => {
                let mut acc = self.formula()?;
                let mut count = 1;
                loop {
                    self.skip_ws();
                    if self.peek() != Some('(') {
                        break;
                    }
                    let next = self.formula()?;
                    acc = if head == "and" {
                        StlFormula::and(acc, next)
                    } else {
                        StlFormula::or(acc, next)
                    };
                    count += 1;
                }
                if count < 2 {
                    return Err(self.error(format!("`{head}` needs at least two operands")));
                }
                acc
            }
            "G" | "F" => {
                let a_pos = {
                    self.skip_ws();
                    self.pos
                };
                let a = self.number()?;
                let b = self.number()?;
                if !(a >= 0.0 && a <= b) {
                    return Err(StlError::Parse {
                        pos: a_pos,
                        message: format!("interval [{a}, {b}] must satisfy 0 <= a <= b"),
                    });
                }
                let body = self.formula()?;
                if head == "G" {
                    StlFormula::globally(a, b, body)
                } else {
                    StlFormula::eventually(a, b, body)
                }
            }
            other => {
                return Err(StlError::Parse {
                    pos: at,
                    message: format!("unknown operator `{other}`"),
                })
            }
        };
        self.expect(')')?;
        Ok(f)
    }
}

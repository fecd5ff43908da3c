//! Tokens, grammars and reverse-Polish formulas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UnOp {
    Square,
    Sqrt,
    Recip,
    Double,
    Halve,
    Neg,
    Log,
    Atan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl UnOp {
    pub const ALL: [UnOp; 8] =
        [UnOp::Square, UnOp::Sqrt, UnOp::Recip, UnOp::Double, UnOp::Halve, UnOp::Neg, UnOp::Log, UnOp::Atan];

    pub fn glyph(self) -> char {
        match self {
            UnOp::Square => 'Q',
            UnOp::Sqrt => 'R',
            UnOp::Recip => 'I',
            UnOp::Double => 'O',
            UnOp::Halve => 'o',
            UnOp::Neg => 'N',
            UnOp::Log => 'L',
            UnOp::Atan => 'T',
        }
    }

    pub fn from_glyph(c: char) -> Option<UnOp> {
        UnOp::ALL.into_iter().find(|u| u.glyph() == c)
    }
}

impl BinOp {
    pub const ALL: [BinOp; 4] = [BinOp::Add, BinOp::Sub, BinOp::Mul, BinOp::Div];

    pub fn glyph(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }

    pub fn from_glyph(c: char) -> Option<BinOp> {
        BinOp::ALL.into_iter().find(|b| b.glyph() == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Var(u8),
    /// Integer literal 1–5.
    Lit(u8),
    Un(UnOp),
    Bin(BinOp),
}

impl Token {
    pub fn arity(self) -> u8 {
        match self {
            Token::Var(_) | Token::Lit(_) => 0,
            Token::Un(_) => 1,
            Token::Bin(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub vars: Vec<String>,
    pub unary: Vec<UnOp>,
    pub binary: Vec<BinOp>,
    pub literals: bool,
    pub max_len: usize,
}

/// Largest number of grammar variables supported by the evaluator.
pub const MAX_VARS: usize = 8;

impl Grammar {
    /// All operators, no literals, maximum length 9.
    pub fn standard(vars: &[String]) -> Grammar {
        Grammar { vars: vars.to_vec(), unary: UnOp::ALL.to_vec(), binary: BinOp::ALL.to_vec(), literals: false, max_len: 9 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vars.is_empty() || self.vars.len() > MAX_VARS {
            return Err(Error::Config(format!("grammar needs 1..={MAX_VARS} variables")));
        }
        if self.max_len == 0 {
            return Err(Error::Config("search.max_len must be at least 1".into()));
        }
        Ok(())
    }

    /// Candidate tokens for a position of the given arity, in grammar order.
    pub fn choices(&self, arity: u8) -> Vec<Token> {
        match arity {
            0 => {
                let mut v: Vec<Token> = (0..self.vars.len() as u8).map(Token::Var).collect();
                if self.literals {
                    v.extend((1..=5).map(Token::Lit));
                }
                v
            }
            1 => self.unary.iter().map(|&u| Token::Un(u)).collect(),
            _ => self.binary.iter().map(|&b| Token::Bin(b)).collect(),
        }
    }

    pub fn token_text(&self, t: Token) -> String {
        match t {
            Token::Var(i) => self.vars[i as usize].clone(),
            Token::Lit(k) => k.to_string(),
            Token::Un(u) => u.glyph().to_string(),
            Token::Bin(b) => b.glyph().to_string(),
        }
    }

    /// Parse an RPN string by greedy longest match; whitespace is ignored.
    pub fn parse(&self, text: &str) -> Result<Formula> {
        let mut toks = Vec::new();
        let mut rest = text.trim_start();
        while !rest.is_empty() {
            let mut best: Option<(usize, Token)> = None;
            for (i, v) in self.vars.iter().enumerate() {
                if rest.starts_with(v.as_str()) && best.is_none_or(|(l, _)| v.len() > l) {
                    best = Some((v.len(), Token::Var(i as u8)));
                }
            }
            let c = rest.chars().next().expect("non-empty");
            if best.is_none() {
                best = UnOp::from_glyph(c)
                    .map(Token::Un)
                    .or_else(|| BinOp::from_glyph(c).map(Token::Bin))
                    .or_else(|| c.to_digit(10).filter(|d| (1..=5).contains(d)).map(|d| Token::Lit(d as u8)))
                    .map(|t| (c.len_utf8(), t));
            }
            let (len, tok) = best.ok_or_else(|| Error::Config(format!("cannot parse formula at '{rest}'")))?;
            toks.push(tok);
            rest = rest[len..].trim_start();
        }
        Formula::new(toks)
    }
}

/// Stack-valid RPN token sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Formula {
    pub tokens: Vec<Token>,
}

/// Running stack depth check; true when the sequence evaluates to one value.
pub fn stack_valid(arities: impl IntoIterator<Item = u8>) -> bool {
    let mut d: i32 = 0;
    let mut any = false;
    for a in arities {
        any = true;
        d += 1 - a as i32;
        if d < 1 {
            return false;
        }
    }
    any && d == 1
}

impl Formula {
    pub fn new(tokens: Vec<Token>) -> Result<Formula> {
        if !stack_valid(tokens.iter().map(|t| t.arity())) {
            return Err(Error::Config("formula is not stack-valid".into()));
        }
        Ok(Formula { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Arity signature such as "0020022".
    pub fn template(&self) -> String {
        self.tokens.iter().map(|t| char::from(b'0' + t.arity())).collect()
    }

    pub fn rpn(&self, g: &Grammar) -> String {
        self.tokens.iter().map(|&t| g.token_text(t)).collect()
    }

    pub fn infix(&self, g: &Grammar) -> String {
        let mut st: Vec<(String, bool)> = Vec::new();
        for &t in &self.tokens {
            match t {
                Token::Var(_) | Token::Lit(_) => st.push((g.token_text(t), true)),
                Token::Un(u) => {
                    let (a, atom) = st.pop().expect("valid");
                    let wrap = |s: &str| if atom { s.to_string() } else { format!("({s})") };
                    let s = match u {
                        UnOp::Square => format!("{}^2", wrap(&a)),
                        UnOp::Sqrt => format!("sqrt({a})"),
                        UnOp::Recip => format!("1/{}", wrap(&a)),
                        UnOp::Double => format!("2*{}", wrap(&a)),
                        UnOp::Halve => format!("{}/2", wrap(&a)),
                        UnOp::Neg => format!("-{}", wrap(&a)),
                        UnOp::Log => format!("log({a})"),
                        UnOp::Atan => format!("atan({a})"),
                    };
                    let atomic = matches!(u, UnOp::Sqrt | UnOp::Log | UnOp::Atan);
                    st.push((s, atomic));
                }
                Token::Bin(b) => {
                    let (r, ra) = st.pop().expect("valid");
                    let (l, la) = st.pop().expect("valid");
                    let w = |s: String, atom: bool| if atom { s } else { format!("({s})") };
                    st.push((format!("{} {} {}", w(l, la), b.glyph(), w(r, ra)), false));
                }
            }
        }
        st.pop().expect("valid").0
    }
}

/// Stack-valid arity templates of length `len` in lexicographic order.
pub fn templates(len: usize) -> Vec<Vec<u8>> {
    fn rec(len: usize, depth: i32, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        let pos = cur.len();
        if pos == len {
            if depth == 1 {
                out.push(cur.clone());
            }
            return;
        }
        let remaining = (len - pos) as i32;
        for a in 0..=2u8 {
            let nd = depth + 1 - a as i32;
            // Each later binary token lowers the depth by one at most.
            if nd < 1 || nd - 1 > remaining - 1 {
                continue;
            }
            cur.push(a);
            rec(len, nd, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(len, 0, &mut Vec::new(), &mut out);
    out
}

/// All formulas of `g` up to its maximum length, in search order: by length,
/// then template, then tokens in grammar order.
pub fn enumerate(g: &Grammar) -> impl Iterator<Item = Formula> + '_ {
    (1..=g.max_len).flat_map(move |len| {
        templates(len).into_iter().flat_map(move |tpl| {
            let choices: Vec<Vec<Token>> = tpl.iter().map(|&a| g.choices(a)).collect();
            Odometer::new(choices).map(|toks| Formula { tokens: toks })
        })
    })
}

/// Iterates the Cartesian product of per-position choices, last position
/// fastest.
pub struct Odometer {
    choices: Vec<Vec<Token>>,
    idx: Vec<usize>,
    done: bool,
}

impl Odometer {
    pub fn new(choices: Vec<Vec<Token>>) -> Self {
        let done = choices.iter().any(|c| c.is_empty());
        Odometer { idx: vec![0; choices.len()], choices, done }
    }

    /// Advance; returns the lowest position whose token changed, or `None`
    /// when exhausted.
    pub fn advance(&mut self) -> Option<usize> {
        for pos in (0..self.idx.len()).rev() {
            self.idx[pos] += 1;
            if self.idx[pos] < self.choices[pos].len() {
                return Some(pos);
            }
            self.idx[pos] = 0;
        }
        self.done = true;
        None
    }

    pub fn current(&self) -> Vec<Token> {
        self.idx.iter().zip(&self.choices).map(|(&i, c)| c[i]).collect()
    }

    pub fn token(&self, pos: usize) -> Token {
        self.choices[pos][self.idx[pos]]
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

impl Iterator for Odometer {
    type Item = Vec<Token>;

    fn next(&mut self) -> Option<Vec<Token>> {
        if self.done {
            return None;
        }
        let cur = self.current();
        if self.advance().is_none() {
            self.done = true;
        }
        Some(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_order() {
        let t: Vec<String> = templates(3).iter().map(|t| t.iter().map(|a| a.to_string()).collect()).collect();
        assert_eq!(t, vec!["002", "011"]);
    }

    #[test]
    fn parse_and_print() {
        let g = Grammar::standard(&["x".into(), "p_x".into(), "y".into(), "p_y".into()]);
        let f = g.parse("xy*p_xp_y*+").unwrap();
        assert_eq!(f.template(), "0020022");
        assert_eq!(f.rpn(&g), "xy*p_xp_y*+");
        assert_eq!(f.infix(&g), "(x * y) + (p_x * p_y)");
        assert!(g.parse("x+").is_err());
    }
}

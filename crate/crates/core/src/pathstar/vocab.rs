use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token layout: node values `0..N`, six separators, then `k` planning tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_values: usize,
    pub planning_tokens: usize,
}

impl Vocabulary {
    pub const SPECIALS: usize = 6;

    pub fn new(n_values: usize, planning_tokens: usize) -> Self {
        Self { n_values, planning_tokens }
    }

    pub fn size(&self) -> usize {
        self.n_values + Self::SPECIALS + self.planning_tokens
    }

    pub fn edge_sep(&self) -> usize {
        self.n_values
    }

    pub fn pair_sep(&self) -> usize {
        self.n_values + 1
    }

    pub fn query_sep(&self) -> usize {
        self.n_values + 2
    }

    pub fn answer_start(&self) -> usize {
        self.n_values + 3
    }

    pub fn eos(&self) -> usize {
        self.n_values + 4
    }

    pub fn pad(&self) -> usize {
        self.n_values + 5
    }

    /// Id of planning token `i` (0-based).
    pub fn plan(&self, i: usize) -> usize {
        debug_assert!(i < self.planning_tokens);
        self.n_values + Self::SPECIALS + i
    }

    pub fn plan_ids(&self) -> Vec<usize> {
        (0..self.planning_tokens).map(|i| self.plan(i)).collect()
    }

    pub fn is_node(&self, id: usize) -> bool {
        id < self.n_values
    }

    pub fn is_plan(&self, id: usize) -> bool {
        id >= self.n_values + Self::SPECIALS && id < self.size()
    }

    pub fn surface(&self, id: usize) -> String {
        if id < self.n_values {
            return id.to_string();
        }
        match id - self.n_values {
            0 => "|".into(),
            1 => ",".into(),
            2 => "/".into(),
            3 => "=".into(),
            4 => "<eos>".into(),
            5 => "<pad>".into(),
            j if id < self.size() => format!("<plan{}>", j - Self::SPECIALS + 1),
            _ => format!("<unk{id}>"),
        }
    }

    pub fn id_of(&self, surface: &str) -> Option<usize> {
        if let Ok(v) = surface.parse::<usize>() {
            return (v < self.n_values).then_some(v);
        }
        let special = match surface {
            "|" => 0,
            "," => 1,
            "/" => 2,
            "=" => 3,
            "<eos>" => 4,
            "<pad>" => 5,
            s => {
                let i: usize = s.strip_prefix("<plan")?.strip_suffix('>')?.parse().ok()?;
                if i == 0 || i > self.planning_tokens {
                    return None;
                }
                Self::SPECIALS + i - 1
            }
        };
        Some(self.n_values + special)
    }

    /// Space-separated surface form of a token sequence.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.surface(i)).collect::<Vec<_>>().join(" ")
    }

    /// Re-encodes tokens of `from` into this vocabulary via their surface
    /// strings; `None` if any token has no counterpart.
    pub fn translate(&self, from: &Vocabulary, ids: &[usize]) -> Option<Vec<usize>> {
        ids.iter().map(|&i| self.id_of(&from.surface(i))).collect()
    }

    /// Sidecar mapping written next to dataset files.
    pub fn to_json(&self) -> serde_json::Value {
        let tokens: Vec<_> = (0..self.size()).map(|i| self.surface(i)).collect();
        serde_json::json!({
            "n_values": self.n_values,
            "planning_tokens": self.planning_tokens,
            "tokens": tokens,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let get = |k: &str| {
            v.get(k)
                .and_then(serde_json::Value::as_u64)
                .map(|x| x as usize)
                .ok_or_else(|| Error::Config(format!("vocabulary file lacks {k}")))
        };
        Ok(Self::new(get("n_values")?, get("planning_tokens")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_and_disjoint_specials() {
        let v = Vocabulary::new(10, 4);
        assert_eq!(v.size(), 20);
        let specials = [v.edge_sep(), v.pair_sep(), v.query_sep(), v.answer_start(), v.eos(), v.pad()];
        assert!(specials.iter().all(|&s| !v.is_node(s) && !v.is_plan(s)));
        assert!(v.plan_ids().iter().all(|&p| v.is_plan(p) && !v.is_node(p)));
    }

    #[test]
    fn surface_round_trip() {
        let v = Vocabulary::new(7, 3);
        for id in 0..v.size() {
            assert_eq!(v.id_of(&v.surface(id)), Some(id));
        }
        assert_eq!(v.id_of("7"), None);
        assert_eq!(v.id_of("<plan4>"), None);
    }

    #[test]
    fn translate_between_node_ranges() {
        let small = Vocabulary::new(5, 0);
        let big = Vocabulary::new(9, 2);
        let ids = vec![4, small.pair_sep(), 3, small.eos()];
        let t = big.translate(&small, &ids).unwrap();
        assert_eq!(t, vec![4, big.pair_sep(), 3, big.eos()]);
        assert!(small.translate(&big, &[8]).is_none());
    }
}

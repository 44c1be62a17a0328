use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";

/// Output label set: base units, optional accent units, then `<sos>` and `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenInventory {
    units: Vec<String>,
    accent_units: usize,
    index: HashMap<String, usize>,
}

impl TokenInventory {
    pub fn new(units: Vec<String>) -> Result<Self> {
        Self::build(units, 0)
    }

    /// Placeholder word-piece set `wp0..wp{n-1}` of the given size.
    pub fn with_size(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("wp{i}")).collect()).expect("generated units are unique")
    }

    fn build(units: Vec<String>, accent_units: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(units.len() + 2);
        for (i, u) in units.iter().enumerate() {
            if u.is_empty() || u.contains(char::is_whitespace) || u == SOS || u == EOS {
                return Err(Error::validation("inventory", format!("invalid unit `{u}`")));
            }
            if index.insert(u.clone(), i).is_some() {
                return Err(Error::validation("inventory", format!("duplicate unit `{u}`")));
            }
        }
        index.insert(SOS.to_string(), units.len());
        index.insert(EOS.to_string(), units.len() + 1);
        Ok(TokenInventory {
            units,
            accent_units,
            index,
        })
    }

    /// Extends the inventory with one `<accent:NAME>` unit per accent.
    pub fn with_accent_units(&self, accent_names: &[String]) -> Result<Self> {
        if self.accent_units > 0 {
            return Err(Error::Config("inventory already carries accent units".into()));
        }
        let mut units = self.units.clone();
        units.extend(accent_names.iter().map(|a| accent_unit(a)));
        Self::build(units, accent_names.len())
    }

    /// Units excluding specials (accent units included).
    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn base_size(&self) -> usize {
        self.units.len() - self.accent_units
    }

    pub fn accent_unit_count(&self) -> usize {
        self.accent_units
    }

    pub fn size(&self) -> usize {
        self.units.len() + 2
    }

    pub fn sos(&self) -> usize {
        self.units.len()
    }

    pub fn eos(&self) -> usize {
        self.units.len() + 1
    }

    pub fn id(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: usize) -> &str {
        if id < self.units.len() {
            &self.units[id]
        } else if id == self.sos() {
            SOS
        } else {
            EOS
        }
    }

    pub fn is_accent_unit(&self, id: usize) -> bool {
        id >= self.base_size() && id < self.units.len()
    }

    /// The accent unit id for accent `c`, when present.
    pub fn accent_id(&self, c: usize) -> Option<usize> {
        (c < self.accent_units).then(|| self.base_size() + c)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .filter(|&i| i < self.units.len())
                    .ok_or_else(|| Error::Data(format!("token `{t}` is not in the inventory")))
            })
            .collect()
    }

    /// Drops specials and accent units.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i < self.base_size())
            .map(|&i| self.units[i].clone())
            .collect()
    }

    /// Space-separated units for checkpoint headers.
    pub fn serialize(&self) -> (String, usize) {
        (self.units.join(" "), self.accent_units)
    }

    pub fn deserialize(units: &str, accent_units: usize) -> Result<Self> {
        let units: Vec<String> = if units.is_empty() {
            Vec::new()
        } else {
            units.split(' ').map(str::to_string).collect()
        };
        if accent_units > units.len() {
            return Err(Error::Config("accent unit count exceeds inventory".into()));
        }
        Self::build(units, accent_units)
    }
}

pub fn accent_unit(name: &str) -> String {
    format!("<accent:{name}>")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_word_piece_inventory_has_202_labels() {
        let inv = TokenInventory::with_size(200);
        assert_eq!(inv.size(), 202);
        assert_eq!((inv.sos(), inv.eos()), (200, 201));
        assert_eq!(inv.unit(0), "wp0");
    }

    #[test]
    fn accent_units_extend_by_c() {
        let names: Vec<String> = (0..9).map(|i| format!("A{i}")).collect();
        let inv = TokenInventory::with_size(200).with_accent_units(&names).unwrap();
        assert_eq!(inv.size(), 200 + 2 + 9);
        assert_eq!(inv.accent_id(2), Some(202));
        assert!(inv.is_accent_unit(202));
        assert_eq!(inv.decode(&[3, 202, inv.eos()]), vec!["wp3".to_string()]);
    }

    #[test]
    fn ids_are_contiguous() {
        let inv = TokenInventory::new(vec!["a".into(), "b".into()]).unwrap();
        let ids: Vec<usize> = ["a", "b", SOS, EOS].iter().map(|u| inv.id(u).unwrap()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_unknown_and_duplicate_units() {
        let inv = TokenInventory::new(vec!["a".into()]).unwrap();
        assert!(inv.encode(&["z".into()]).is_err());
        assert!(inv.encode(&[SOS.into()]).is_err());
        assert!(TokenInventory::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let inv = TokenInventory::new(vec!["x".into(), "y".into()])
            .unwrap()
            .with_accent_units(&["US".into()])
            .unwrap();
        let (s, n) = inv.serialize();
        assert_eq!(TokenInventory::deserialize(&s, n).unwrap(), inv);
    }
}

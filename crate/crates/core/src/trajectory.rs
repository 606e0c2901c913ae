use crate::ode::Clock;
use crate::{Error, Result};

/// Named scalar series sampled on one uniform clock.
///
/// Column order is insertion order, which is also the export order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    clock: Clock,
    columns: Vec<(String, Vec<f64>)>,
}

impl Trajectory {
    /// Empty trajectory holding only the `t` column.
    pub fn new(clock: Clock) -> Self {
        Self {
            clock,
            columns: vec![("t".to_string(), clock.times())],
        }
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.clock.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clock.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.clock.dt
    }

    pub fn times(&self) -> &[f64] {
        &self.columns[0].1
    }

    /// Appends a column, replacing any existing column of the same name.
    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len() {
            return Err(Error::Dimension(format!(
                "column '{name}' has {} samples, trajectory has {}",
                values.len(),
                self.len()
            )));
        }
        if name == "t" {
            return Err(Error::Dimension("column 't' is reserved".into()));
        }
        match self.columns.iter_mut().find(|(n, _)| *n == name) {
            Some((_, existing)) => *existing = values,
            None => self.columns.push((name, values)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }

    pub fn columns(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.columns.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    /// Copies every column of `other` except `t` into `self`.
    pub fn merge(&mut self, other: &Trajectory) -> Result<()> {
        for (name, values) in other.columns().skip(1) {
            self.insert(name, values.to_vec())?;
        }
        Ok(())
    }

    /// Keeps only the named columns, in the given order. Missing names are
    /// skipped.
    pub fn select(&self, names: &[String]) -> Trajectory {
        let mut out = Trajectory::new(self.clock);
        for name in names {
            if let Some(values) = self.get(name) {
                if name != "t" {
                    out.columns.push((name.clone(), values.to_vec()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_share_length() {
        let mut tr = Trajectory::new(Clock::new(0.0, 0.5, 3));
        assert_eq!(tr.times(), &[0.0, 0.5, 1.0]);
        tr.insert("x1", vec![1.0, 2.0, 3.0]).unwrap();
        assert!(tr.insert("x2", vec![1.0]).is_err());
        assert!(tr.insert("t", vec![0.0; 3]).is_err());
        tr.insert("x1", vec![0.0; 3]).unwrap();
        assert_eq!(tr.names().collect::<Vec<_>>(), ["t", "x1"]);
        assert_eq!(tr.get("x1").unwrap(), &[0.0; 3]);
    }
}

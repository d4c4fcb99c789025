use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Domain {
    pub name: String,
    pub size: usize,
}

/// Ordered functional domains, each owning a contiguous run of network
/// indices; together they cover `0..n_networks` exactly once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Domain>", into = "Vec<Domain>")]
pub struct DomainPartition {
    domains: Vec<Domain>,
}

impl DomainPartition {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        ensure!(!domains.is_empty(), "a partition needs at least one domain");
        for d in &domains {
            ensure!(d.size > 0, "domain `{}` is empty", d.name);
        }
        for (i, a) in domains.iter().enumerate() {
            ensure!(!domains[..i].iter().any(|b| b.name == a.name), "duplicate domain `{}`", a.name);
        }
        Ok(DomainPartition { domains })
    }

    pub fn from_sizes(spec: &[(&str, usize)]) -> Result<Self> {
        Self::new(spec.iter().map(|&(name, size)| Domain { name: name.to_string(), size }).collect())
    }

    /// The 53-network, seven-domain layout: SC 5, AUD 2, SM 9, VS 9, CC 17,
    /// DM 7, CB 4.
    pub fn neuromark53() -> Self {
        Self::from_sizes(&[("SC", 5), ("AUD", 2), ("SM", 9), ("VS", 9), ("CC", 17), ("DM", 7), ("CB", 4)]).unwrap()
    }

    /// `n_domains` equal domains named D1, D2, ... over `n` networks.
    pub fn uniform(n: usize, n_domains: usize) -> Result<Self> {
        ensure!(n_domains > 0 && n % n_domains == 0, "{} networks do not split into {} equal domains", n, n_domains);
        Self::new((0..n_domains).map(|i| Domain { name: format!("D{}", i + 1), size: n / n_domains }).collect())
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn n_networks(&self) -> usize {
        self.domains.iter().map(|d| d.size).sum()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn names(&self) -> Vec<&str> {
        self.domains.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.name == name)
    }

    pub fn range(&self, domain: usize) -> Range<usize> {
        let start: usize = self.domains[..domain].iter().map(|d| d.size).sum();
        start..start + self.domains[domain].size
    }

    pub fn ranges(&self) -> Vec<Range<usize>> {
        (0..self.domains.len()).map(|d| self.range(d)).collect()
    }

    /// Domain index of every network.
    pub fn labels(&self) -> Vec<usize> {
        self.domains.iter().enumerate().flat_map(|(i, d)| std::iter::repeat_n(i, d.size)).collect()
    }

    pub fn check_covers(&self, n: usize) -> Result<()> {
        ensure!(self.n_networks() == n, "partition covers {} networks, data has {}", self.n_networks(), n);
        Ok(())
    }
}

impl TryFrom<Vec<Domain>> for DomainPartition {
    type Error = crate::error::Error;

    fn try_from(domains: Vec<Domain>) -> Result<Self> {
        DomainPartition::new(domains)
    }
}

impl From<DomainPartition> for Vec<Domain> {
    fn from(p: DomainPartition) -> Self {
        p.domains
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_covers_53_networks_in_order() {
        let p = DomainPartition::neuromark53();
        assert_eq!(p.n_networks(), 53);
        assert_eq!(p.names(), vec!["SC", "AUD", "SM", "VS", "CC", "DM", "CB"]);
        let ranges = p.ranges();
        assert_eq!(ranges[0], 0..5);
        assert_eq!(ranges[6], 49..53);
        for w in ranges.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn rejects_empty_and_duplicate_domains() {
        assert!(DomainPartition::from_sizes(&[("A", 2), ("A", 3)]).is_err());
        assert!(DomainPartition::from_sizes(&[("A", 0)]).is_err());
        assert!(DomainPartition::uniform(10, 3).is_err());
        assert!(DomainPartition::neuromark53().check_covers(54).is_err());
    }

    #[test]
    fn serde_validates() {
        let p = DomainPartition::uniform(16, 4).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<DomainPartition>(&json).unwrap(), p);
        assert!(serde_json::from_str::<DomainPartition>("[]").is_err());
    }
}

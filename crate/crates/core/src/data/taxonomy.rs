use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Stuff,
    Thing,
}

/// Class names and their stuff/thing partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTaxonomy", into = "RawTaxonomy")]
pub struct ClassTaxonomy {
    names: Vec<String>,
    partition: Vec<Partition>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTaxonomy {
    names: Vec<String>,
    partition: Vec<Partition>,
}

impl TryFrom<RawTaxonomy> for ClassTaxonomy {
    type Error = Error;

    fn try_from(raw: RawTaxonomy) -> Result<Self> {
        ClassTaxonomy::new(raw.names, raw.partition)
    }
}

impl From<ClassTaxonomy> for RawTaxonomy {
    fn from(t: ClassTaxonomy) -> Self {
        RawTaxonomy { names: t.names, partition: t.partition }
    }
}

impl ClassTaxonomy {
    pub fn new(names: Vec<String>, partition: Vec<Partition>) -> Result<Self> {
        if names.len() != partition.len() {
            return Err(Error::invalid(format!(
                "taxonomy: {} names but {} partition tags",
                names.len(),
                partition.len()
            )));
        }
        if names.len() < 2 || names.len() > 255 {
            return Err(Error::invalid(format!("taxonomy: need 2..=255 classes, got {}", names.len())));
        }
        if !partition.contains(&Partition::Stuff) || !partition.contains(&Partition::Thing) {
            return Err(Error::invalid("taxonomy: need at least one stuff and one thing class"));
        }
        Ok(ClassTaxonomy { names, partition })
    }

    /// Five stuff classes and three thing classes, street-scene flavoured.
    pub fn desk_default() -> Self {
        use Partition::*;
        let names = ["sky", "building", "vegetation", "road", "sidewalk", "car", "person", "sign"];
        let partition = vec![Stuff, Stuff, Stuff, Stuff, Stuff, Thing, Thing, Thing];
        ClassTaxonomy::new(names.iter().map(|s| s.to_string()).collect(), partition).expect("valid default")
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn partition(&self, class: usize) -> Partition {
        self.partition[class]
    }

    pub fn is_thing(&self, class: usize) -> bool {
        self.partition[class] == Partition::Thing
    }

    pub fn stuff_ids(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| !self.is_thing(c)).collect()
    }

    pub fn thing_ids(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&c| self.is_thing(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_five_stuff_three_thing() {
        let t = ClassTaxonomy::desk_default();
        assert_eq!(t.num_classes(), 8);
        assert_eq!(t.stuff_ids(), vec![0, 1, 2, 3, 4]);
        assert_eq!(t.thing_ids(), vec![5, 6, 7]);
    }

    #[test]
    fn rejects_degenerate_taxonomies() {
        let n = |k: usize| (0..k).map(|i| format!("c{i}")).collect::<Vec<_>>();
        assert!(ClassTaxonomy::new(n(1), vec![Partition::Stuff]).is_err());
        assert!(ClassTaxonomy::new(n(2), vec![Partition::Stuff, Partition::Stuff]).is_err());
        assert!(ClassTaxonomy::new(n(2), vec![Partition::Stuff]).is_err());
        assert!(ClassTaxonomy::new(n(2), vec![Partition::Stuff, Partition::Thing]).is_ok());
    }
}

use std::collections::BTreeSet;

use crate::encoders::{BinaryMask, ImageSample};
use crate::error::{Error, Result};

/// A K-shot task: labelled supports and one query of the same category.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub category: String,
    pub support: Vec<(ImageSample, BinaryMask)>,
    pub query: ImageSample,
    /// Absent at prediction time.
    pub query_mask: Option<BinaryMask>,
}

impl Episode {
    pub fn new(
        id: &str,
        category: &str,
        support: Vec<(ImageSample, BinaryMask)>,
        query: ImageSample,
        query_mask: Option<BinaryMask>,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::Dataset(format!("episode `{id}` has no support pairs")));
        }
        let (h, w) = (query.height(), query.width());
        for (k, (img, mask)) in support.iter().enumerate() {
            if mask.count() == 0 {
                return Err(Error::Dataset(format!("episode `{id}`: support mask {k} is empty")));
            }
            if (img.height(), img.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
                return Err(Error::Dataset(format!("episode `{id}`: support {k} size differs from the query")));
            }
            if img.category != category {
                return Err(Error::Dataset(format!("episode `{id}`: support {k} is `{}`, episode is `{category}`", img.category)));
            }
        }
        if query.category != category {
            return Err(Error::Dataset(format!("episode `{id}`: query is `{}`, episode is `{category}`", query.category)));
        }
        if let Some(m) = &query_mask {
            if (m.height(), m.width()) != (h, w) {
                return Err(Error::Dataset(format!("episode `{id}`: query mask size differs from the image")));
            }
        }
        Ok(Self { id: id.to_string(), category: category.to_string(), support, query, query_mask })
    }

    pub fn shots(&self) -> usize {
        self.support.len()
    }

    /// The same episode restricted to its first `k` supports.
    pub fn with_shots(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.support.len() {
            return Err(Error::invalid(format!("episode `{}` has {} supports, asked for {k}", self.id, self.support.len())));
        }
        Ok(Self { support: self.support[..k].to_vec(), ..self.clone() })
    }

    pub fn without_query_mask(&self) -> Self {
        Self { query_mask: None, ..self.clone() }
    }
}

/// Labelled target-domain pairs of one category, with no queries.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportPool {
    pub category: String,
    pub pairs: Vec<(ImageSample, BinaryMask)>,
}

pub fn categories<'a>(names: impl IntoIterator<Item = &'a str>) -> BTreeSet<String> {
    names.into_iter().map(str::to_string).collect()
}

/// Fails when source and target share a category label.
pub fn check_disjoint(source: &BTreeSet<String>, target: &BTreeSet<String>) -> Result<()> {
    let shared: Vec<&String> = source.intersection(target).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!("source and target share categories: {shared:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(cat: &str) -> ImageSample {
        ImageSample::new(4, 4, vec![0.5; 48], cat, "src").unwrap()
    }

    fn mask(n: usize) -> BinaryMask {
        BinaryMask::from_fn(4, 4, |y, x| y * 4 + x < n)
    }

    #[test]
    fn validates_supports() {
        assert!(Episode::new("e", "a", vec![(img("a"), mask(3))], img("a"), Some(mask(2))).is_ok());
        assert!(Episode::new("e", "a", vec![(img("a"), mask(0))], img("a"), None).is_err());
        assert!(Episode::new("e", "a", vec![(img("b"), mask(3))], img("a"), None).is_err());
        assert!(Episode::new("e", "a", vec![], img("a"), None).is_err());
    }

    #[test]
    fn shot_restriction() {
        let e = Episode::new("e", "a", vec![(img("a"), mask(3)), (img("a"), mask(5))], img("a"), None).unwrap();
        assert_eq!(e.with_shots(1).unwrap().support[0].1, mask(3));
        assert!(e.with_shots(3).is_err());
    }

    #[test]
    fn disjointness() {
        let s = categories(["red disk", "blue ring"]);
        assert!(check_disjoint(&s, &categories(["green bar"])).is_ok());
        assert!(matches!(check_disjoint(&s, &categories(["blue ring"])), Err(Error::Dataset(_))));
    }
}

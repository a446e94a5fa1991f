use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_ROSTER: &str = include_str!("../../data/texture_roster.json");

/// Per-category textured/untextured assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextureRoster {
    pub textured_categories: BTreeSet<String>,
    pub untextured_categories: BTreeSet<String>,
}

impl Default for TextureRoster {
    /// The turntable-dataset category lists shipped with the crate.
    fn default() -> Self {
        serde_json::from_str(DEFAULT_ROSTER).expect("bundled texture roster is valid JSON")
    }
}

impl TextureRoster {
    pub fn new(
        textured: impl IntoIterator<Item = String>,
        untextured: impl IntoIterator<Item = String>,
    ) -> Result<Self> {
        let roster = Self {
            textured_categories: textured.into_iter().collect(),
            untextured_categories: untextured.into_iter().collect(),
        };
        roster.validate()?;
        Ok(roster)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let roster: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: Some(e.line() as u64),
            message: e.to_string(),
        })?;
        roster.validate()?;
        Ok(roster)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(both) = self
            .textured_categories
            .intersection(&self.untextured_categories)
            .next()
        {
            return Err(Error::Validation(format!(
                "category {both:?} is both textured and untextured"
            )));
        }
        Ok(())
    }

    pub fn is_textured(&self, category: &str) -> Option<bool> {
        if self.textured_categories.contains(category) {
            Some(true)
        } else if self.untextured_categories.contains(category) {
            Some(false)
        } else {
            None
        }
    }

    /// All categories in a stable order: the position is the category id.
    pub fn categories(&self) -> Vec<&str> {
        let mut all: Vec<&str> = self
            .textured_categories
            .iter()
            .chain(self.untextured_categories.iter())
            .map(String::as_str)
            .collect();
        all.sort_unstable();
        all
    }

    pub fn category_id(&self, category: &str) -> Option<u32> {
        self.categories()
            .iter()
            .position(|c| *c == category)
            .map(|i| i as u32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roster_sizes() {
        let r = TextureRoster::default();
        assert_eq!(r.textured_categories.len(), 10);
        assert_eq!(r.untextured_categories.len(), 41);
        r.validate().unwrap();
        assert_eq!(r.is_textured("cereal_box"), Some(true));
        assert_eq!(r.is_textured("coffee_mug"), Some(false));
        assert_eq!(r.is_textured("spaceship"), None);
    }

    #[test]
    fn overlapping_sets_rejected() {
        let err = TextureRoster::new(vec!["a".into(), "b".into()], vec!["b".into()]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn category_ids_are_sorted_positions() {
        let r =
            TextureRoster::new(vec!["zeta".into()], vec!["alpha".into(), "mid".into()]).unwrap();
        assert_eq!(r.category_id("alpha"), Some(0));
        assert_eq!(r.category_id("mid"), Some(1));
        assert_eq!(r.category_id("zeta"), Some(2));
    }
}

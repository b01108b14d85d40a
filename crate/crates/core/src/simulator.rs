//! The simulator decision function and decline-discrepancy detection.

use serde::{Deserialize, Serialize};

use crate::backend::{self, parse, Backend, Decision};
use crate::catalog::Item;
use crate::error::Result;
use crate::profile::UserProfile;
use crate::prompts;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Simulated,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Behavior {
    pub interact: bool,
    pub rationale: String,
    pub source: Source,
}

impl Behavior {
    /// The user consumed the item.
    pub fn observed() -> Self {
        Self {
            interact: true,
            rationale: "observed interaction".into(),
            source: Source::Real,
        }
    }

    /// The user never touched the item (arena negatives).
    pub fn unobserved() -> Self {
        Self {
            interact: false,
            rationale: "no observed interaction".into(),
            source: Source::Real,
        }
    }

    pub fn simulated(decision: &Decision) -> Self {
        Self {
            interact: decision.interact,
            rationale: decision.rationale.clone(),
            source: Source::Simulated,
        }
    }
}

/// An item the real user consumed but the simulator declined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyCase {
    pub item: Item,
    pub rating: u8,
    pub simulated: Behavior,
    pub real: Behavior,
    pub position: usize,
}

/// One judgment, with the exit signal kept.
pub fn judge(profile: &UserProfile, item: &Item, backend: &dyn Backend, reprompts: u32) -> Result<Decision> {
    let request = prompts::decide(profile, item);
    Ok(backend::ask(backend, &request, reprompts, parse::parse_decision)?.value)
}

pub fn decide(profile: &UserProfile, item: &Item, backend: &dyn Backend, reprompts: u32) -> Result<Behavior> {
    judge(profile, item, backend, reprompts).map(|d| Behavior::simulated(&d))
}

pub fn find_discrepancy(
    simulated: &Behavior,
    real: &Behavior,
    item: &Item,
    rating: u8,
    position: usize,
) -> Option<DiscrepancyCase> {
    (!simulated.interact && real.interact).then(|| DiscrepancyCase {
        item: item.clone(),
        rating,
        simulated: simulated.clone(),
        real: real.clone(),
        position,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::profile::Preference;

    fn item(attrs: &[&str]) -> Item {
        Item::new(1, "1", "Some Title", attrs.iter().copied())
    }

    #[test]
    fn mock_rule() {
        let mock = MockBackend::new(0);
        let p = UserProfile::new("u", vec![Preference::positive(["Mystery"], "Enjoys Mystery")]);
        assert!(decide(&p, &item(&["Mystery"]), &mock, 0).unwrap().interact);

        let p = UserProfile::new("u", vec![Preference::negative(["Comedy"], "Dislikes Comedy")]);
        assert!(!decide(&p, &item(&["Comedy"]), &mock, 0).unwrap().interact);

        let p = UserProfile::new(
            "u",
            vec![
                Preference::positive(["Comedy"], "Likes Comedy"),
                Preference::negative(["Romance"], "Dislikes Romance"),
            ],
        );
        assert!(!decide(&p, &item(&["Comedy", "Romance"]), &mock, 0).unwrap().interact);
        assert!(!decide(&p, &item(&["Western"]), &mock, 0).unwrap().interact);
    }

    #[test]
    fn decision_is_pure_under_mock() {
        let mock = MockBackend::new(5);
        let p = UserProfile::new("u", vec![Preference::positive(["Drama"], "Enjoys Drama")]);
        let a = decide(&p, &item(&["Drama"]), &mock, 0).unwrap();
        let b = decide(&p, &item(&["Drama"]), &mock, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source, Source::Simulated);
    }

    #[test]
    fn discrepancy_condition() {
        let it = item(&["Drama"]);
        let no = Behavior {
            interact: false,
            rationale: "r".into(),
            source: Source::Simulated,
        };
        let yes = Behavior { interact: true, ..no.clone() };
        assert!(find_discrepancy(&no, &Behavior::observed(), &it, 5, 0).is_some());
        assert!(find_discrepancy(&yes, &Behavior::observed(), &it, 5, 0).is_none());
        assert!(find_discrepancy(&yes, &Behavior::unobserved(), &it, 5, 0).is_none());
        assert!(find_discrepancy(&no, &Behavior::unobserved(), &it, 5, 0).is_none());
    }

    #[test]
    fn enumerates_declines_with_positions() {
        let mock = MockBackend::new(0);
        let p = UserProfile::new("u", vec![Preference::positive(["Drama"], "Enjoys Drama")]);
        // 16 items; the 7 at these positions are attribute-disjoint and get declined
        let declined = [1usize, 3, 4, 8, 11, 12, 15];
        let items: Vec<Item> = (0..16)
            .map(|i| {
                let g = if declined.contains(&i) { "Horror" } else { "Drama" };
                Item::new(i as u32, i.to_string(), format!("T{i}"), [g])
            })
            .collect();
        let cases: Vec<DiscrepancyCase> = items
            .iter()
            .enumerate()
            .filter_map(|(pos, it)| {
                let sim = decide(&p, it, &mock, 0).unwrap();
                find_discrepancy(&sim, &Behavior::observed(), it, 4, pos)
            })
            .collect();
        assert_eq!(cases.iter().map(|c| c.position).collect::<Vec<_>>(), declined);
    }
}

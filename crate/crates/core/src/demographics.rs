//! Closed demographic category sets and the per-user ground-truth profile.
//!
//! Literals follow the cohort questionnaire wording. Matching is verbatim
//! after trimming and Unicode NFC normalization; the only aliases accepted are
//! en-dash spellings of numeric ranges and the short `Liberal` party name.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PREFER_NOT_TO_SAY: &str = "Prefer not to say";

/// Trims and NFC-normalizes a category literal before verbatim matching.
pub fn canonical_form(raw: &str) -> String {
    raw.trim().nfc().collect()
}

macro_rules! category_enum {
    (
        $(#[$meta:meta])*
        $name:ident {
            $( $variant:ident => $lit:literal $( | $alias:literal )* ),+ $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $( $variant ),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[ $( $name::$variant ),+ ];
            pub const LITERALS: &'static [&'static str] = &[ $( $lit ),+ ];

            pub fn literal(self) -> &'static str {
                match self {
                    $( $name::$variant => $lit ),+
                }
            }

            fn aliases(self) -> &'static [&'static str] {
                match self {
                    $( $name::$variant => &[ $( $alias ),* ] ),+
                }
            }

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_literal(raw: &str) -> Option<Self> {
                let s = canonical_form(raw);
                Self::ALL
                    .iter()
                    .copied()
                    .find(|c| c.literal() == s || c.aliases().contains(&s.as_str()))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.literal())
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.literal())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let raw = String::deserialize(d)?;
                $name::from_literal(&raw).ok_or_else(|| {
                    serde::de::Error::custom(format!(
                        concat!("unknown ", stringify!($name), " literal {:?}"),
                        raw
                    ))
                })
            }
        }
    };
}

category_enum! {
    Gender {
        Male => "Male",
        Female => "Female",
        Other => "Other",
        PreferNotToSay => "Prefer not to say",
    }
}

category_enum! {
    AgeBracket {
        Age18To24 => "18-24" | "18–24",
        Age25To34 => "25-34" | "25–34",
        Age35To44 => "35-44" | "35–44",
        Age45To54 => "45-54" | "45–54",
        Age55To64 => "55-64" | "55–64",
        Age65To74 => "65-74" | "65–74",
        Age75Plus => "75 and over",
        PreferNotToSay => "Prefer not to say",
    }
}

category_enum! {
    /// Annual personal income in AUD.
    IncomeBracket {
        Under15600 => "$1-$15,599" | "$1–$15,599",
        From15600 => "$15,600-$20,799" | "$15,600–$20,799",
        From20800 => "$20,800-$25,999" | "$20,800–$25,999",
        From26000 => "$26,000-$33,799" | "$26,000–$33,799",
        From33800 => "$33,800-$41,599" | "$33,800–$41,599",
        From41600 => "$41,600-$51,999" | "$41,600–$51,999",
        From52000 => "$52,000-$64,999" | "$52,000–$64,999",
        From65000 => "$65,000-$77,999" | "$65,000–$77,999",
        From78000 => "$78,000-$90,999" | "$78,000–$90,999",
        From91000 => "$91,000-$103,999" | "$91,000–$103,999",
        From104000 => "$104,000-$155,999" | "$104,000–$155,999",
        From156000 => "$156,000 or more",
        PreferNotToSay => "Prefer not to say",
    }
}

impl IncomeBracket {
    /// Lower bound of the bracket in annual AUD; `None` for the non-answer.
    pub fn annual_lower_bound(self) -> Option<u32> {
        const BOUNDS: [u32; 12] = [
            1, 15_600, 20_800, 26_000, 33_800, 41_600, 52_000, 65_000, 78_000, 91_000, 104_000,
            156_000,
        ];
        BOUNDS.get(self.index()).copied()
    }
}

category_enum! {
    Education {
        Postgraduate => "Postgraduate degree level",
        Bachelor => "Bachelor degree level",
        Year12 => "Year 12 or equivalent",
        LessThanYear12 => "Less than year 12 or equivalent",
        PreferNotToSay => "Prefer not to say",
    }
}

category_enum! {
    Employment {
        FullTime => "Employed full time",
        PartTime => "Employed part time",
        UnemployedLooking => "Unemployed and looking for work",
        UnemployedNotLooking => "Unemployed and not looking for work",
        Retired => "Retired",
        PreferNotToSay => "Prefer not to say",
    }
}

category_enum! {
    Party {
        Labor => "Labor",
        Liberal => "Liberal (National Coalition)" | "Liberal",
        Greens => "Greens",
        None => "None",
        Other => "Other",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Gender,
    Age,
    Income,
    Education,
    Employment,
    Party,
}

impl Attribute {
    /// Canonical modelling and reporting order.
    pub const ALL: [Attribute; 6] = [
        Attribute::Gender,
        Attribute::Age,
        Attribute::Income,
        Attribute::Education,
        Attribute::Employment,
        Attribute::Party,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Income => "income",
            Attribute::Education => "education",
            Attribute::Employment => "employment",
            Attribute::Party => "party",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Attribute::Gender => "Gender",
            Attribute::Age => "Age",
            Attribute::Income => "Income",
            Attribute::Education => "Education",
            Attribute::Employment => "Employment",
            Attribute::Party => "Party",
        }
    }

    /// Every literal of the closed set, questionnaire order.
    pub fn levels(self) -> &'static [&'static str] {
        match self {
            Attribute::Gender => Gender::LITERALS,
            Attribute::Age => AgeBracket::LITERALS,
            Attribute::Income => IncomeBracket::LITERALS,
            Attribute::Education => Education::LITERALS,
            Attribute::Employment => Employment::LITERALS,
            Attribute::Party => Party::LITERALS,
        }
    }

    /// Classes a predictor is allowed to emit: the closed set without the
    /// non-answer, and without `Other` for gender.
    pub fn prediction_labels(self) -> &'static [&'static str] {
        let levels = self.levels();
        match self {
            Attribute::Gender => &levels[..2],
            Attribute::Party => levels,
            _ => &levels[..levels.len() - 1],
        }
    }

    /// Resolves a raw literal to the canonical one, or `None` if it is not a
    /// member of the closed set.
    pub fn parse_level(self, raw: &str) -> Option<&'static str> {
        match self {
            Attribute::Gender => Gender::from_literal(raw).map(Gender::literal),
            Attribute::Age => AgeBracket::from_literal(raw).map(AgeBracket::literal),
            Attribute::Income => IncomeBracket::from_literal(raw).map(IncomeBracket::literal),
            Attribute::Education => Education::from_literal(raw).map(Education::literal),
            Attribute::Employment => Employment::from_literal(raw).map(Employment::literal),
            Attribute::Party => Party::from_literal(raw).map(Party::literal),
        }
    }

    pub fn level_index(self, literal: &str) -> Option<usize> {
        let canonical = self.parse_level(literal)?;
        self.levels().iter().position(|l| *l == canonical)
    }

    /// Age and income brackets carry an order; the rest are nominal.
    pub fn is_ordinal(self) -> bool {
        matches!(self, Attribute::Age | Attribute::Income)
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        Attribute::ALL
            .iter()
            .copied()
            .find(|a| a.name() == lower || (lower == "age_bracket" && *a == Attribute::Age))
            .ok_or_else(|| Error::UnknownAttribute(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemographicProfile {
    pub user_id: String,
    pub gender: Gender,
    #[serde(rename = "age")]
    pub age_bracket: AgeBracket,
    #[serde(rename = "income")]
    pub income_bracket: IncomeBracket,
    pub education: Education,
    pub employment: Employment,
    pub party: Party,
}

impl DemographicProfile {
    pub fn level(&self, attribute: Attribute) -> &'static str {
        match attribute {
            Attribute::Gender => self.gender.literal(),
            Attribute::Age => self.age_bracket.literal(),
            Attribute::Income => self.income_bracket.literal(),
            Attribute::Education => self.education.literal(),
            Attribute::Employment => self.employment.literal(),
            Attribute::Party => self.party.literal(),
        }
    }

    pub fn level_index(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Gender => self.gender.index(),
            Attribute::Age => self.age_bracket.index(),
            Attribute::Income => self.income_bracket.index(),
            Attribute::Education => self.education.index(),
            Attribute::Employment => self.employment.index(),
            Attribute::Party => self.party.index(),
        }
    }

    pub fn declined(&self, attribute: Attribute) -> bool {
        self.level(attribute) == PREFER_NOT_TO_SAY
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip_through_parse() {
        for attr in Attribute::ALL {
            for (i, lit) in attr.levels().iter().enumerate() {
                assert_eq!(attr.parse_level(lit), Some(*lit));
                assert_eq!(attr.level_index(lit), Some(i));
            }
        }
    }

    #[test]
    fn closed_set_sizes() {
        let sizes: Vec<usize> = Attribute::ALL
            .iter()
            .map(|a| a.prediction_labels().len())
            .collect();
        assert_eq!(sizes, vec![2, 7, 12, 4, 5, 5]);
        assert_eq!(IncomeBracket::ALL.len(), 13);
    }

    #[test]
    fn trimming_nfc_and_aliases() {
        assert_eq!(Gender::from_literal("  Female "), Some(Gender::Female));
        assert_eq!(Gender::from_literal("F"), None);
        assert_eq!(Gender::from_literal("female"), None);
        assert_eq!(AgeBracket::from_literal("25–34"), Some(AgeBracket::Age25To34));
        assert_eq!(Party::from_literal("Liberal"), Some(Party::Liberal));
        // "e" + combining acute composes under NFC; still not a member.
        assert_eq!(Party::from_literal("Gre\u{0065}\u{0301}ns"), None);
    }

    #[test]
    fn income_bounds_follow_bracket_order() {
        let bounds: Vec<u32> = IncomeBracket::ALL
            .iter()
            .filter_map(|b| b.annual_lower_bound())
            .collect();
        assert_eq!(bounds.len(), 12);
        assert!(bounds.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(IncomeBracket::PreferNotToSay.annual_lower_bound(), None);
    }
}

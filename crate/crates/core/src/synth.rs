//! Seeded synthetic cohorts for tests, fixtures and model validation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::demographics::{
    AgeBracket, Attribute, DemographicProfile, Education, Employment, Gender, IncomeBracket, Party,
};
use crate::ingest::{AdImpression, CohortDataset};
use crate::nbr::PanelRow;

/// Monday 2023-01-02 00:00:00 UTC.
pub const DEFAULT_START: i64 = 1_672_617_600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub users: usize,
    pub weeks: u32,
    pub seed: u64,
    pub start: i64,
    /// Sessions per user-week, inclusive range.
    pub sessions_per_week: (u32, u32),
    /// Ads per session, inclusive range.
    pub ads_per_session: (u32, u32),
    /// Mean and sd of ln(seconds) between ads within a session.
    pub within_gap_ln: (f64, f64),
    /// Chance that any one attribute is answered "Prefer not to say".
    pub decline_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            users: 50,
            weeks: 8,
            seed: 1,
            start: DEFAULT_START,
            sessions_per_week: (1, 3),
            ads_per_session: (3, 10),
            within_gap_ln: (2.0, 0.4),
            decline_rate: 0.0,
        }
    }
}

struct Creative {
    key: &'static str,
    brands: &'static [&'static str],
    phrases: &'static [(&'static str, &'static str)],
}

const CREATIVES: &[Creative] = &[
    Creative {
        key: "gambling",
        brands: &["Sportsbet", "Ladbrokes", "Neds"],
        phrases: &[
            ("Bet on the footy this weekend", "Boosted odds on every game."),
            ("Same game multi betting is here", "Place your bets before kick off."),
        ],
    },
    Creative {
        key: "alcohol",
        brands: &["Great Northern", "Jacob's Creek", "Bundaberg"],
        phrases: &[
            ("Cold beer for the long weekend", "Drink responsibly."),
            ("Shiraz and wine picks for summer", "Free delivery on mixed cases."),
        ],
    },
    Creative {
        key: "politics",
        brands: &["Voice Forward", "Community Alliance"],
        phrases: &[
            ("Your vote shapes the election", "Authorised by the campaign."),
            ("Meet your local candidate", "Real policy for real families."),
        ],
    },
    Creative {
        key: "education",
        brands: &["Monash Online", "TAFE Queensland", "Seek Learning"],
        phrases: &[
            ("Start a degree that fits your life", "Flexible study options."),
            ("Find your next career in tech", "Short courses from six weeks."),
        ],
    },
    Creative {
        key: "energy",
        brands: &["Tesla Powerwall", "Origin Solar"],
        phrases: &[("Store your solar with a home battery", "Cut your power bills.")],
    },
    Creative {
        key: "retail",
        brands: &["Bunnings", "Myer", "Kmart"],
        phrases: &[
            ("Big sale on everything in store", "Shop the deals now."),
            ("Fresh fashion and shoes for less", "New season styles."),
        ],
    },
    Creative {
        key: "travel",
        brands: &["Qantas", "Webjet"],
        phrases: &[("Cheap flights to Bali", "Book your holiday today.")],
    },
    Creative {
        key: "food",
        brands: &["Woolworths", "Hello Fresh"],
        phrases: &[("Dinner sorted with a meal kit", "Recipes the whole family loves.")],
    },
];

/// Category weight multiplier for a user: gambling and alcohol skew male,
/// gambling also toward lower education, politics toward older users.
fn weight(key: &str, p: &DemographicProfile) -> f64 {
    let male = p.gender == Gender::Male;
    let older = matches!(
        p.age_bracket,
        AgeBracket::Age55To64 | AgeBracket::Age65To74 | AgeBracket::Age75Plus
    );
    let no_degree = matches!(p.education, Education::Year12 | Education::LessThanYear12);
    match key {
        "gambling" => 0.6 * if male { 2.0 } else { 1.0 } * if no_degree { 1.5 } else { 1.0 },
        "alcohol" => 0.6 * if male { 1.8 } else { 1.0 },
        "politics" => 0.5 * if older { 2.5 } else { 1.0 },
        "education" => 0.8,
        _ => 1.5,
    }
}

struct Ad {
    id: String,
    key: &'static str,
    title: String,
    body: String,
}

fn ad_pool() -> Vec<Ad> {
    let mut out = Vec::new();
    for c in CREATIVES {
        for (bi, brand) in c.brands.iter().enumerate() {
            for (pi, (title, body)) in c.phrases.iter().enumerate() {
                out.push(Ad {
                    id: format!("ad-{}-{bi}{pi}", c.key),
                    key: c.key,
                    title: format!("{title} with {brand}"),
                    body: body.to_string(),
                });
            }
        }
    }
    out
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[T]) -> T {
    *items.choose(rng).expect("non-empty")
}

pub fn random_profile(user_id: &str, decline_rate: f64, rng: &mut ChaCha8Rng) -> DemographicProfile {
    let declined = |rng: &mut ChaCha8Rng| rng.gen::<f64>() < decline_rate;
    let gender = if declined(rng) {
        Gender::PreferNotToSay
    } else {
        pick(rng, &[Gender::Male, Gender::Female])
    };
    let age = if declined(rng) {
        AgeBracket::PreferNotToSay
    } else {
        pick(rng, &AgeBracket::ALL[..7])
    };
    let income = if declined(rng) {
        IncomeBracket::PreferNotToSay
    } else {
        pick(rng, &IncomeBracket::ALL[..12])
    };
    let education = if declined(rng) {
        Education::PreferNotToSay
    } else {
        pick(rng, &Education::ALL[..4])
    };
    let employment = if declined(rng) {
        Employment::PreferNotToSay
    } else {
        pick(rng, &Employment::ALL[..5])
    };
    DemographicProfile {
        user_id: user_id.to_string(),
        gender,
        age_bracket: age,
        income_bracket: income,
        education,
        employment,
        party: pick(rng, Party::ALL),
    }
}

/// Impressions grouped into sessions separated by hours, with log-normal
/// gaps of a few seconds inside a session.
pub fn generate_cohort(config: &CohortConfig) -> CohortDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let pool = ad_pool();
    let within = LogNormal::new(config.within_gap_ln.0, config.within_gap_ln.1).expect("valid gap law");
    let mut impressions = Vec::new();
    let mut profiles = BTreeMap::new();
    let width = config.users.to_string().len().max(3);
    for u in 0..config.users {
        let user_id = format!("u{u:0width$}");
        let profile = random_profile(&user_id, config.decline_rate, &mut rng);
        let weights: Vec<f64> = pool.iter().map(|a| weight(a.key, &profile)).collect();
        let total: f64 = weights.iter().sum();
        for w in 0..config.weeks {
            let week_start = config.start + i64::from(w) * 7 * 86_400;
            let n = rng.gen_range(config.sessions_per_week.0..=config.sessions_per_week.1);
            // Sessions start in distinct slots at least six hours apart.
            let mut slots: Vec<i64> = (0..28).collect();
            slots.shuffle(&mut rng);
            let mut starts: Vec<i64> = slots[..n as usize]
                .iter()
                .map(|s| week_start + s * 6 * 3600 + rng.gen_range(0..3600))
                .collect();
            starts.sort_unstable();
            for start in starts {
                let len = rng.gen_range(config.ads_per_session.0..=config.ads_per_session.1);
                let mut t = start;
                for k in 0..len {
                    if k > 0 {
                        t += (within.sample(&mut rng).round() as i64).max(1);
                    }
                    let mut x = rng.gen::<f64>() * total;
                    let mut idx = 0;
                    while idx + 1 < pool.len() && x >= weights[idx] {
                        x -= weights[idx];
                        idx += 1;
                    }
                    let ad = &pool[idx];
                    impressions.push(AdImpression {
                        user_id: user_id.clone(),
                        timestamp: t,
                        ad_id: ad.id.clone(),
                        source: "facebook".into(),
                        title: ad.title.clone(),
                        body: ad.body.clone(),
                        image_refs: vec![format!("images/{}.jpg", ad.id)],
                    });
                }
            }
        }
        profiles.insert(user_id, profile);
    }
    CohortDataset::new(impressions, profiles).0
}

/// Timestamps whose log-gaps mix two normal components: a within-session
/// mode at `ln_modes.0` and a between-session mode at `ln_modes.1`.
pub fn bimodal_timestamps(
    n_gaps: usize,
    ln_modes: (f64, f64),
    ln_sd: f64,
    between_share: f64,
    seed: u64,
) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = LogNormal::new(ln_modes.0, ln_sd).expect("valid law");
    let hi = LogNormal::new(ln_modes.1, ln_sd).expect("valid law");
    let mut t = DEFAULT_START;
    let mut out = vec![t];
    for _ in 0..n_gaps {
        let g = if rng.gen::<f64>() < between_share {
            hi.sample(&mut rng)
        } else {
            lo.sample(&mut rng)
        };
        t += (g.round() as i64).max(1);
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NbPanelConfig {
    pub users: usize,
    pub weeks: u32,
    /// Baseline rate per exposed ad (female users).
    pub base_rate: f64,
    pub gender_irr: f64,
    pub alpha: f64,
    /// Inclusive range of weekly total exposure.
    pub exposure: (u64, u64),
    pub seed: u64,
}

impl Default for NbPanelConfig {
    fn default() -> Self {
        NbPanelConfig {
            users: 500,
            weeks: 20,
            base_rate: 0.1,
            gender_irr: 2.0,
            alpha: 0.5,
            exposure: (5, 40),
            seed: 1,
        }
    }
}

/// Panel with NB2 counts: `y ~ Poisson(Gamma(1/a, a mu))`, `mu = exposure *
/// base_rate * gender_irr^male`. Half the users are male; all other
/// attributes sit at their reference levels.
pub fn nb_panel(config: &NbPanelConfig) -> Vec<PanelRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rows = Vec::with_capacity(config.users * config.weeks as usize);
    for u in 0..config.users {
        let male = u % 2 == 0;
        let gender = if male { "Male" } else { "Female" };
        let mut covariates = BTreeMap::new();
        covariates.insert(Attribute::Gender, gender.to_string());
        for w in 0..config.weeks {
            let exposure = rng.gen_range(config.exposure.0..=config.exposure.1);
            let mu = exposure as f64 * config.base_rate * if male { config.gender_irr } else { 1.0 };
            let lambda = if config.alpha > 0.0 {
                Gamma::new(1.0 / config.alpha, config.alpha * mu)
                    .expect("valid gamma")
                    .sample(&mut rng)
            } else {
                mu
            };
            let y = if lambda > 0.0 {
                Poisson::new(lambda).expect("valid poisson").sample(&mut rng) as u64
            } else {
                0
            };
            rows.push(PanelRow {
                user_id: format!("u{u:04}"),
                week_index: w,
                y,
                exposure,
                covariates: covariates.clone(),
            });
        }
    }
    rows
}

/// Writes `impressions.jsonl` and `profiles.csv` into `dir`.
pub fn write_cohort(dir: &std::path::Path, cohort: &CohortDataset) -> crate::error::Result<()> {
    use crate::error::Error;
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("impressions.jsonl");
    let mut buf = Vec::new();
    for imp in &cohort.impressions {
        serde_json::to_writer(&mut buf, imp)?;
        buf.push(b'\n');
    }
    std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("profiles.csv");
    let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    crate::ingest::write_profiles(&mut file, &cohort.profiles)?;
    file.flush().map_err(|e| Error::io(&path, e))
}

use std::collections::HashMap;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    Entity, EntityId, EntityKind, KgError, KgSuite, KnowledgeGraph, Relation, Triple, NO_COMPANY, ZERO_INCOME,
};

/// Inclusive sampling ranges for attribute values.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueRanges {
    /// (min, max, step) in centimetres.
    pub height_cm: (u32, u32, u32),
    pub weight_kg: (u32, u32),
    pub birth_years: (i32, i32),
    pub establish_years: (i32, i32),
    /// (min, max, step) in dollars for employed persons; jobless persons get `$0`.
    pub income: (u32, u32, u32),
    pub employees: (u32, u32),
    pub population: (u32, u32, u32),
    pub area_km2: (u32, u32),
    /// (min, max, step) in millions of dollars.
    pub market_millions: (u32, u32, u32),
}

impl Default for ValueRanges {
    fn default() -> Self {
        Self {
            height_cm: (160, 200, 2),
            weight_kg: (50, 80),
            birth_years: (1950, 2000),
            establish_years: (1900, 2019),
            income: (10_000, 300_000, 10_000),
            employees: (100, 1000),
            population: (100_000, 10_000_000, 10_000),
            area_km2: (100, 480),
            market_millions: (100, 10_100, 100),
        }
    }
}

impl ValueRanges {
    pub fn validate(&self) -> Result<(), KgError> {
        let stepped = [
            ("height", self.height_cm),
            ("income", self.income),
            ("population", self.population),
            ("market value", self.market_millions),
        ];
        for (name, (lo, hi, step)) in stepped {
            if lo > hi || step == 0 || lo == 0 {
                return Err(KgError::Infeasible(format!("{name} range {lo}..{hi} step {step}")));
            }
        }
        let plain = [("weight", self.weight_kg), ("employees", self.employees), ("area", self.area_km2)];
        for (name, (lo, hi)) in plain {
            if lo > hi {
                return Err(KgError::Infeasible(format!("{name} range {lo}..{hi}")));
            }
        }
        for (name, (lo, hi)) in [("birth", self.birth_years), ("establish", self.establish_years)] {
            if lo > hi || NaiveDate::from_ymd_opt(lo, 1, 1).is_none() || NaiveDate::from_ymd_opt(hi, 12, 31).is_none() {
                return Err(KgError::Infeasible(format!("{name} years {lo}..{hi}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KgConfig {
    pub persons: usize,
    pub companies: usize,
    pub cities: usize,
    pub states: usize,
    pub businesses: usize,
    /// Fraction of persons whose `live_in` city equals their birthplace.
    pub overlap_ratio: f64,
    /// Fraction of non-mayor persons without a job.
    pub jobless_fraction: f64,
    pub ranges: ValueRanges,
    pub seed: u64,
}

impl Default for KgConfig {
    fn default() -> Self {
        Self {
            persons: 300,
            companies: 200,
            cities: 50,
            states: 5,
            businesses: 20,
            overlap_ratio: 0.99,
            jobless_fraction: 0.1,
            ranges: ValueRanges::default(),
            seed: 0,
        }
    }
}

impl KgConfig {
    pub fn paper_scale() -> Self {
        Self { persons: 3000, companies: 2000, cities: 300, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), KgError> {
        let infeasible = |m: String| Err(KgError::Infeasible(m));
        for (name, n) in [
            ("persons", self.persons),
            ("companies", self.companies),
            ("cities", self.cities),
            ("states", self.states),
            ("businesses", self.businesses),
        ] {
            if n == 0 {
                return infeasible(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return infeasible(format!("overlap_ratio {} outside [0, 1]", self.overlap_ratio));
        }
        if !(0.0..=1.0).contains(&self.jobless_fraction) {
            return infeasible(format!("jobless_fraction {} outside [0, 1]", self.jobless_fraction));
        }
        if self.cities > self.persons {
            return infeasible(format!(
                "every city needs its own mayor: {} cities but {} persons",
                self.cities, self.persons
            ));
        }
        if self.companies < self.cities {
            return infeasible(format!(
                "every city needs a located largest company: {} cities but {} companies",
                self.cities, self.companies
            ));
        }
        if self.employed_count() == 0 {
            return infeasible("ceo and chairman need at least one employed non-mayor".into());
        }
        if self.cities < 2 && self.matching_live_in() < self.persons {
            return infeasible("live_in different from birthplace needs at least two cities".into());
        }
        self.ranges.validate()
    }

    fn jobless_count(&self) -> usize {
        ((self.persons - self.cities) as f64 * self.jobless_fraction).round() as usize
    }

    fn employed_count(&self) -> usize {
        self.persons.saturating_sub(self.cities).saturating_sub(self.jobless_count())
    }

    fn matching_live_in(&self) -> usize {
        (self.persons as f64 * self.overlap_ratio).round() as usize
    }
}

#[derive(Default)]
struct Registry {
    entities: Vec<Entity>,
    by_surface: HashMap<String, EntityId>,
}

impl Registry {
    fn intern(&mut self, kind: EntityKind, surface: String) -> EntityId {
        if let Some(&id) = self.by_surface.get(&surface) {
            debug_assert_eq!(self.entities[id as usize].kind, kind);
            return id;
        }
        let id = self.entities.len() as EntityId;
        self.by_surface.insert(surface.clone(), id);
        self.entities.push(Entity { id, kind, surface });
        id
    }

    fn named(&mut self, kind: EntityKind, label: &str, n: usize) -> Vec<EntityId> {
        (1..=n).map(|i| self.intern(kind, format!("{label}#{i}"))).collect()
    }

    fn shard(&self, owner: usize, triples: Vec<Triple>) -> Result<KnowledgeGraph, KgError> {
        let mut used: Vec<EntityId> = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
        used.sort_unstable();
        used.dedup();
        let entities = used.into_iter().map(|id| self.entities[id as usize].clone()).collect();
        KnowledgeGraph::new(owner, entities, triples)
    }
}

fn stepped<R: Rng>(rng: &mut R, (lo, hi, step): (u32, u32, u32)) -> u32 {
    lo + step * rng.gen_range(0..=(hi - lo) / step)
}

fn date<R: Rng>(rng: &mut R, (lo, hi): (i32, i32)) -> String {
    let start = NaiveDate::from_ymd_opt(lo, 1, 1).expect("validated year");
    let end = NaiveDate::from_ymd_opt(hi, 12, 31).expect("validated year");
    let day = start + Duration::days(rng.gen_range(0..=(end - start).num_days()));
    debug_assert!(day.year() >= lo && day.year() <= hi);
    day.format("%Y-%m-%d").to_string()
}

/// Builds the person, company and city graphs for `cfg`.
///
/// Deterministic in `cfg` (including its seed). Every person carries all
/// eight person relations, every company all nine company relations, and
/// every city all five city relations.
pub fn generate_kg_suite(cfg: &KgConfig) -> Result<KgSuite, KgError> {
    cfg.validate()?;
    let r = &cfg.ranges;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reg = Registry::default();

    let persons = reg.named(EntityKind::PersonName, "Person", cfg.persons);
    let companies = reg.named(EntityKind::CompanyName, "Company", cfg.companies);
    let cities = reg.named(EntityKind::CityName, "City", cfg.cities);
    let states = reg.named(EntityKind::StateName, "State", cfg.states);
    let businesses = reg.named(EntityKind::BusinessName, "Business", cfg.businesses);
    let no_company = reg.intern(EntityKind::CompanyName, NO_COMPANY.to_string());

    // Roles: mayors first, then jobless non-mayors; everyone else is employed.
    let mut order: Vec<usize> = (0..cfg.persons).collect();
    order.shuffle(&mut rng);
    let mayors: Vec<usize> = order[..cfg.cities].to_vec();
    let jobless_end = cfg.cities + cfg.jobless_count();
    let mut employer: Vec<Option<usize>> = vec![None; cfg.persons];
    for &p in &order[jobless_end..] {
        employer[p] = Some(rng.gen_range(0..cfg.companies));
    }

    let birthplace: Vec<usize> = (0..cfg.persons).map(|_| rng.gen_range(0..cfg.cities)).collect();
    let mut live_in = birthplace.clone();
    let mut movers: Vec<usize> = (0..cfg.persons).collect();
    movers.shuffle(&mut rng);
    for &p in &movers[cfg.matching_live_in()..] {
        let other = rng.gen_range(0..cfg.cities - 1);
        live_in[p] = if other >= birthplace[p] { other + 1 } else { other };
    }

    let mut g1 = Vec::with_capacity(8 * cfg.persons);
    for p in 0..cfg.persons {
        let head = persons[p];
        let mut push = |relation, tail| g1.push(Triple { head, relation, tail });
        let gender = if rng.gen_bool(0.5) { "male" } else { "female" };
        push(Relation::Gender, reg.intern(EntityKind::Gender, gender.into()));
        let h = stepped(&mut rng, r.height_cm);
        push(Relation::Height, reg.intern(EntityKind::Height, format!("{h}cm")));
        let w = rng.gen_range(r.weight_kg.0..=r.weight_kg.1);
        push(Relation::Weight, reg.intern(EntityKind::Weight, format!("{w}kg")));
        let d = date(&mut rng, r.birth_years);
        push(Relation::Birthday, reg.intern(EntityKind::Date, d));
        push(Relation::Birthplace, cities[birthplace[p]]);
        push(Relation::LiveIn, cities[live_in[p]]);
        match employer[p] {
            Some(c) => {
                push(Relation::WorkIn, companies[c]);
                let income = stepped(&mut rng, r.income);
                push(Relation::AnnualIncome, reg.intern(EntityKind::AnnualIncome, format!("${income}")));
            }
            None => {
                push(Relation::WorkIn, no_company);
                push(Relation::AnnualIncome, reg.intern(EntityKind::AnnualIncome, ZERO_INCOME.into()));
            }
        }
    }

    // Every city hosts at least one company so it can have a largest one.
    let mut company_order: Vec<usize> = (0..cfg.companies).collect();
    company_order.shuffle(&mut rng);
    let mut location = vec![0usize; cfg.companies];
    for (i, &c) in company_order.iter().enumerate() {
        location[c] = if i < cfg.cities { i } else { rng.gen_range(0..cfg.cities) };
    }
    let mut staff: Vec<Vec<usize>> = vec![Vec::new(); cfg.companies];
    for (p, e) in employer.iter().enumerate() {
        if let Some(c) = e {
            staff[*c].push(p);
        }
    }
    let employed: Vec<usize> = (0..cfg.persons).filter(|&p| employer[p].is_some()).collect();

    let mut g2 = Vec::with_capacity(9 * cfg.companies);
    for c in 0..cfg.companies {
        let head = companies[c];
        let pool = if staff[c].is_empty() { &employed } else { &staff[c] };
        let ceo = persons[*pool.choose(&mut rng).expect("validated non-empty")];
        let chairman = persons[*pool.choose(&mut rng).expect("validated non-empty")];
        let founder = persons[rng.gen_range(0..cfg.persons)];
        let mut push = |relation, tail| g2.push(Triple { head, relation, tail });
        let d = date(&mut rng, r.establish_years);
        push(Relation::EstablishDate, reg.intern(EntityKind::Date, d));
        let n = rng.gen_range(r.employees.0..=r.employees.1);
        push(Relation::NumberOfEmployees, reg.intern(EntityKind::Number, n.to_string()));
        push(Relation::Ceo, ceo);
        push(Relation::Founder, founder);
        push(Relation::Chairman, chairman);
        push(Relation::MainBusiness, businesses[rng.gen_range(0..cfg.businesses)]);
        push(Relation::LocateIn, cities[location[c]]);
        push(Relation::HasServiceIn, cities[rng.gen_range(0..cfg.cities)]);
        let m = stepped(&mut rng, r.market_millions);
        push(Relation::MarketValue, reg.intern(EntityKind::Market, format!("${m}M")));
    }

    let mut located: Vec<Vec<usize>> = vec![Vec::new(); cfg.cities];
    for (c, &city) in location.iter().enumerate() {
        located[city].push(c);
    }
    let mut g3 = Vec::with_capacity(5 * cfg.cities);
    for city in 0..cfg.cities {
        let head = cities[city];
        let largest = *located[city].choose(&mut rng).expect("every city hosts a company");
        let mut push = |relation, tail| g3.push(Triple { head, relation, tail });
        let a = rng.gen_range(r.area_km2.0..=r.area_km2.1);
        push(Relation::Area, reg.intern(EntityKind::Area, format!("{a}km2")));
        let pop = stepped(&mut rng, r.population);
        push(Relation::Population, reg.intern(EntityKind::Number, pop.to_string()));
        push(Relation::Mayor, persons[mayors[city]]);
        push(Relation::LargestCompany, companies[largest]);
        push(Relation::ContainedBy, states[rng.gen_range(0..cfg.states)]);
    }

    Ok(KgSuite { shards: [reg.shard(1, g1)?, reg.shard(2, g2)?, reg.shard(3, g3)?] })
}

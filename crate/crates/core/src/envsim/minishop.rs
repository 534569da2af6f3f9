use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    illegal, split_for, Action, EnvInner, EnvKind, EnvSpec, Goal, InstanceSet, Instruction,
    Observation, Verb, NOTHING_HAPPENS,
};
use crate::error::{Error, Result};
use crate::hashing::SeedTree;

const ATTRIBUTES: &[&str] = &[
    "red",
    "blue",
    "green",
    "black",
    "white",
    "cotton",
    "wool",
    "leather",
    "silk",
    "denim",
    "small",
    "large",
    "slim",
    "loose",
    "waterproof",
    "vintage",
    "striped",
    "plain",
    "organic",
    "washable",
    "soft",
    "heavy",
    "light",
    "padded",
];

const MIN_PRICE: u32 = 10;
const MAX_PRICE: u32 = 100;
const FAMILY_MIN: usize = 2;
const FAMILY_MAX: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    /// Listing name used as the click argument: attributes then price tag.
    pub id: String,
    pub attrs: Vec<String>,
    pub price: u32,
}

impl Item {
    fn has(&self, attr: &str) -> bool {
        self.attrs.iter().any(|a| a == attr)
    }

    fn satisfies(&self, required: &[String], budget: u32) -> bool {
        self.price <= budget && required.iter().all(|r| self.has(r))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShopState {
    /// Catalog indices on the current results page.
    pub results: Vec<usize>,
    pub selected: Option<usize>,
}

fn attribute_pool(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match ATTRIBUTES.get(i) {
            Some(a) => a.to_string(),
            None => format!("attr{i}"),
        })
        .collect()
}

fn price_tag(price: u32) -> String {
    format!("p{price}")
}

fn random_price(rng: &mut impl Rng) -> u32 {
    5 * rng.gen_range(MIN_PRICE / 5..=MAX_PRICE / 5)
}

/// Items come in families sharing `req_attrs` core attributes, so an
/// instruction usually has same-attribute lookalikes at other prices.
fn generate_catalog(spec: &EnvSpec, rng: &mut impl Rng) -> Vec<Item> {
    let pool = attribute_pool(spec.attr_pool);
    let mut items: Vec<Item> = Vec::with_capacity(spec.catalog_size);
    let mut seen_ids = BTreeSet::new();
    while items.len() < spec.catalog_size {
        let core: Vec<String> = pool.choose_multiple(rng, spec.req_attrs).cloned().collect();
        let members = rng.gen_range(FAMILY_MIN..=FAMILY_MAX);
        for _ in 0..members {
            if items.len() == spec.catalog_size {
                break;
            }
            let rest: Vec<&String> = pool.iter().filter(|a| !core.contains(a)).collect();
            let mut attrs = core.clone();
            attrs.extend(
                rest.choose_multiple(rng, spec.item_attrs - spec.req_attrs)
                    .map(|s| (*s).clone()),
            );
            attrs.shuffle(rng);
            let price = random_price(rng);
            let mut id = format!("{}-{}", attrs.join("-"), price_tag(price));
            let mut dup = 1;
            while seen_ids.contains(&id) {
                id = format!("{}-{}-v{dup}", attrs.join("-"), price_tag(price));
                dup += 1;
            }
            seen_ids.insert(id.clone());
            items.push(Item { id, attrs, price });
        }
    }
    items
}

/// Token-overlap search; ties broken by item id.
fn search(catalog: &[Item], query: &str, k: usize) -> Vec<usize> {
    let terms: Vec<&str> = query.split_whitespace().collect();
    let mut hits: Vec<(usize, usize)> = catalog
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let overlap = terms.iter().filter(|t| item.has(t)).count();
            (overlap > 0).then_some((overlap, i))
        })
        .collect();
    hits.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then_with(|| catalog[a.1].id.cmp(&catalog[b.1].id))
    });
    hits.into_iter().take(k).map(|(_, i)| i).collect()
}

fn instruction_text(required: &[String], budget: u32) -> String {
    format!("{} under {}", required.join(" "), budget)
}

pub(super) fn generate(
    spec: &EnvSpec,
    n_train: usize,
    n_test: usize,
    tree: SeedTree,
) -> Result<InstanceSet> {
    let mut rng = tree.rng();
    let catalog = generate_catalog(spec, &mut rng);
    let total = n_train + n_test;
    let mut goals: BTreeSet<(Vec<String>, u32)> = BTreeSet::new();
    let mut instructions = Vec::with_capacity(total);
    let max_attempts = 200 * total + 1000;
    let mut attempts = 0;
    while instructions.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Config(format!(
                "could only generate {} of {} distinct solvable minishop instructions; \
                 increase catalog_size or attr_pool",
                instructions.len(),
                total
            )));
        }
        let anchor = &catalog[rng.gen_range(0..catalog.len())];
        let mut required: Vec<String> = anchor
            .attrs
            .choose_multiple(&mut rng, spec.req_attrs)
            .cloned()
            .collect();
        required.shuffle(&mut rng);
        let slack = 10 * rng.gen_range(0..=2);
        let budget = (anchor.price.div_ceil(10) * 10 + slack).min(MAX_PRICE);
        let mut key = required.clone();
        key.sort();
        if goals.contains(&(key.clone(), budget)) {
            continue;
        }
        if plan_for(&catalog, spec.results_k, &required, budget).is_none() {
            continue;
        }
        goals.insert((key, budget));
        let i = instructions.len();
        instructions.push(Instruction {
            id: format!("shop-{i:05}"),
            text: instruction_text(&required, budget),
            goal: Goal::Minishop { required, budget },
            split: split_for(i, n_train),
        });
    }
    Ok(InstanceSet::new(spec.clone(), catalog, instructions))
}

pub(super) fn reset(ins: &Instruction) -> (EnvInner, Observation) {
    (
        EnvInner::Minishop(ShopState::default()),
        Observation::new(format!("instruction: {} | results: none", ins.text)),
    )
}

fn render_results(set: &InstanceSet, query: &str, results: &[usize]) -> String {
    if results.is_empty() {
        return format!("results for {query}: none");
    }
    let listing: Vec<String> = results
        .iter()
        .map(|&i| {
            let item = &set.catalog[i];
            format!("[{}] ${}", item.id, item.price)
        })
        .collect();
    format!("results for {query}: {}", listing.join(" ; "))
}

fn render_item(item: &Item) -> String {
    format!(
        "item {} | attributes: {} | price: ${}",
        item.id,
        item.attrs.join(" "),
        item.price
    )
}

pub(super) fn purchase_reward(item: &Item, required: &[String], budget: u32) -> f64 {
    let matched = required.iter().filter(|r| item.has(r)).count();
    let budget_ok = usize::from(item.price <= budget);
    (matched + budget_ok) as f64 / (required.len() + 1) as f64
}

pub(super) fn step(
    set: &InstanceSet,
    required: &[String],
    budget: u32,
    shop: &mut ShopState,
    action: &Action,
) -> Result<(Observation, Option<f64>)> {
    match action.verb {
        Verb::Search => {
            shop.results = search(&set.catalog, &action.arg, set.spec.results_k);
            shop.selected = None;
            Ok((
                Observation::new(render_results(set, &action.arg, &shop.results)),
                None,
            ))
        }
        Verb::Click => match set.item_by_id(&action.arg) {
            Some(i) if shop.results.contains(&i) => {
                shop.selected = Some(i);
                Ok((Observation::new(render_item(&set.catalog[i])), None))
            }
            _ => Ok((Observation::new(NOTHING_HAPPENS), None)),
        },
        Verb::Buy => match shop.selected {
            Some(i) => Ok((
                Observation::default(),
                Some(purchase_reward(&set.catalog[i], required, budget)),
            )),
            None => Ok((Observation::new(NOTHING_HAPPENS), None)),
        },
        _ => Err(illegal(action, EnvKind::Minishop)),
    }
}

pub(super) fn available(set: &InstanceSet, required: &[String], shop: &ShopState) -> Vec<Action> {
    let mut actions: Vec<Action> = required
        .iter()
        .map(|w| Action::new(Verb::Search, w.clone()))
        .collect();
    actions.extend(
        shop.results
            .iter()
            .map(|&i| Action::new(Verb::Click, set.catalog[i].id.clone())),
    );
    if shop.selected.is_some() {
        actions.push(Action::bare(Verb::Buy));
    }
    actions
}

/// The required token carried by the fewest catalog items; ties by name.
fn distinguishing_token<'a>(catalog: &[Item], required: &'a [String]) -> Option<&'a String> {
    required
        .iter()
        .min_by_key(|t| (catalog.iter().filter(|i| i.has(t)).count(), t.as_str()))
}

fn plan_for(catalog: &[Item], k: usize, required: &[String], budget: u32) -> Option<Vec<Action>> {
    let token = distinguishing_token(catalog, required)?;
    search(catalog, token, k)
        .into_iter()
        .find(|&i| catalog[i].satisfies(required, budget))
        .map(|i| {
            vec![
                Action::new(Verb::Search, token.clone()),
                Action::new(Verb::Click, catalog[i].id.clone()),
                Action::bare(Verb::Buy),
            ]
        })
}

/// Search the distinguishing token, click the first satisfying result, buy.
pub(super) fn expert_plan(
    set: &InstanceSet,
    required: &[String],
    budget: u32,
) -> Option<Vec<Action>> {
    plan_for(&set.catalog, set.spec.results_k, required, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::generate_instances;

    fn item(attrs: &[&str], price: u32) -> Item {
        let attrs: Vec<String> = attrs.iter().map(|s| s.to_string()).collect();
        Item {
            id: format!("{}-{}", attrs.join("-"), price_tag(price)),
            attrs,
            price,
        }
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn partial_match_within_budget_scores_three_quarters() {
        let it = item(&["red", "cotton", "slim"], 30);
        let r = purchase_reward(&it, &strs(&["red", "cotton", "large"]), 40);
        assert_eq!(r, 0.75);
    }

    #[test]
    fn reward_grid() {
        let req = strs(&["red", "cotton", "large"]);
        assert_eq!(
            purchase_reward(&item(&["red", "cotton", "large"], 30), &req, 40),
            1.0
        );
        assert_eq!(
            purchase_reward(&item(&["red", "cotton", "large"], 50), &req, 40),
            0.75
        );
        assert_eq!(purchase_reward(&item(&["blue"], 50), &req, 40), 0.0);
        assert_eq!(purchase_reward(&item(&["blue"], 10), &req, 40), 0.25);
    }

    #[test]
    fn search_orders_by_overlap_then_id() {
        let cat = vec![
            item(&["red", "wool"], 10),
            item(&["blue", "wool"], 10),
            item(&["red", "cotton"], 10),
        ];
        let hits = search(&cat, "red cotton", 5);
        assert_eq!(hits, vec![2, 0]);
        let hits = search(&cat, "wool", 1);
        assert_eq!(hits, vec![1]);
        assert!(search(&cat, "silk", 5).is_empty());
    }

    #[test]
    fn generated_instances_have_satisfying_items() {
        let set = generate_instances(&EnvSpec::minishop(), 2, 1, 7).unwrap();
        assert_eq!(set.train().len(), 2);
        for ins in set.train() {
            let Goal::Minishop { required, budget } = &ins.goal else {
                panic!()
            };
            assert_eq!(required.len(), 3);
            assert!(set.catalog.iter().any(|it| it.satisfies(required, *budget)));
        }
    }

    #[test]
    fn reset_shows_instruction_and_empty_results() {
        let set = generate_instances(&EnvSpec::minishop(), 2, 1, 7).unwrap();
        let ins = &set.instructions[0];
        let (st, obs) = set.reset(&ins.id, 0).unwrap();
        assert!(obs.as_str().contains(&ins.text));
        assert!(obs.as_str().contains("results: none"));
        let acts = set.available_actions(&st);
        assert_eq!(acts.len(), 3);
        assert!(acts.iter().all(|a| a.verb == Verb::Search));
    }

    #[test]
    fn results_page_offers_searches_and_clicks_then_buy() {
        let set = generate_instances(&EnvSpec::minishop(), 4, 1, 7).unwrap();
        let ins = &set.instructions[0];
        let Goal::Minishop { required, .. } = &ins.goal else {
            panic!()
        };
        let (mut st, _) = set.reset(&ins.id, 0).unwrap();
        set.step(&mut st, &Action::new(Verb::Search, required[0].clone()))
            .unwrap();
        let EnvInner::Minishop(shop) = &st.inner else {
            panic!()
        };
        let listed = shop.results.len();
        assert!(listed >= 1);
        let acts = set.available_actions(&st);
        let clicks = acts.iter().filter(|a| a.verb == Verb::Click).count();
        let searches = acts.iter().filter(|a| a.verb == Verb::Search).count();
        assert_eq!(clicks, listed);
        assert_eq!(searches, 3);
        assert!(!acts.contains(&Action::bare(Verb::Buy)));
        let click = acts.iter().find(|a| a.verb == Verb::Click).unwrap().clone();
        set.step(&mut st, &click).unwrap();
        assert!(set
            .available_actions(&st)
            .contains(&Action::bare(Verb::Buy)));
    }

    #[test]
    fn timeout_without_purchase_scores_zero() {
        let set = generate_instances(&EnvSpec::minishop(), 1, 1, 7).unwrap();
        let ins = &set.instructions[0];
        let Goal::Minishop { required, .. } = &ins.goal else {
            panic!()
        };
        let (mut st, _) = set.reset(&ins.id, 0).unwrap();
        let search = Action::new(Verb::Search, required[0].clone());
        let mut last = None;
        for _ in 0..8 {
            last = Some(set.step(&mut st, &search).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, Some(0.0));
    }

    #[test]
    fn invalid_buy_consumes_turn() {
        let set = generate_instances(&EnvSpec::minishop(), 1, 1, 7).unwrap();
        let (mut st, _) = set.reset(&set.instructions[0].id, 0).unwrap();
        let out = set.step(&mut st, &Action::bare(Verb::Buy)).unwrap();
        assert_eq!(out.observation.as_str(), NOTHING_HAPPENS);
        assert_eq!(st.turn, 1);
        assert!(!out.done);
        assert!(matches!(
            set.step(&mut st, &Action::new(Verb::Goto, "lab")),
            Err(Error::IllegalAction { .. })
        ));
    }
}

//! Template grammar over a fixed small world, used as a low-entropy stand-in
//! for natural language.
//!
//! The world (people, towns, trades, animals, ...) is generated once from a
//! constant seed; the caller's seed only drives which person each document
//! is about and which templates are used. Most slot fillers are attributes
//! of the document's person, so the next word is usually pinned down by
//! context.

use std::collections::{BTreeSet, HashSet};
use std::sync::OnceLock;

use super::CorpusError;
use crate::numeric::Rng;

const WORLD_SEED: u64 = 0x5EED_0F_57A7E;
const N_PEOPLE: usize = 1200;
const N_FAMILIES: usize = 500;
const N_TOWNS: usize = 240;
const N_RIVERS: usize = 60;

/// (profession, tool, workplace, material, verb, product)
const TRADES: [[&str; 6]; 30] = [
    ["baker", "oven", "bakery", "dough", "kneads", "bread"],
    ["farmer", "plough", "farm", "soil", "tills", "wheat"],
    ["fisher", "net", "harbor", "boat", "rows", "herring"],
    ["smith", "hammer", "forge", "iron", "shapes", "horseshoes"],
    ["carpenter", "saw", "workshop", "timber", "cuts", "chairs"],
    ["weaver", "loom", "mill", "wool", "spins", "cloth"],
    ["potter", "wheel", "studio", "clay", "molds", "bowls"],
    ["tailor", "needle", "shop", "fabric", "stitches", "coats"],
    ["miner", "pickaxe", "mine", "rock", "breaks", "coal"],
    ["brewer", "kettle", "brewery", "barley", "boils", "ale"],
    ["cobbler", "awl", "stall", "leather", "stretches", "boots"],
    ["painter", "brush", "gallery", "canvas", "colors", "portraits"],
    ["doctor", "stethoscope", "clinic", "patient", "examines", "remedies"],
    ["teacher", "chalk", "school", "lesson", "prepares", "reports"],
    ["sailor", "compass", "ship", "sail", "hoists", "charts"],
    ["gardener", "spade", "garden", "hedge", "trims", "roses"],
    ["butcher", "cleaver", "market", "meat", "slices", "sausages"],
    ["mason", "chisel", "quarry", "stone", "carves", "walls"],
    ["shepherd", "crook", "pasture", "flock", "guards", "lambs"],
    ["beekeeper", "smoker", "apiary", "hive", "tends", "honey"],
    ["glassblower", "pipe", "furnace", "sand", "melts", "vases"],
    ["jeweler", "loupe", "boutique", "gem", "polishes", "rings"],
    ["printer", "press", "printworks", "paper", "inks", "books"],
    ["cook", "ladle", "kitchen", "soup", "stirs", "stews"],
    ["hunter", "bow", "forest", "deer", "tracks", "furs"],
    ["miller", "millstone", "watermill", "grain", "grinds", "flour"],
    ["vintner", "barrel", "vineyard", "grapes", "presses", "wine"],
    ["clockmaker", "tweezers", "tower", "gears", "adjusts", "clocks"],
    ["ranger", "lantern", "outpost", "trail", "patrols", "maps"],
    ["builder", "trowel", "site", "brick", "lays", "houses"],
];

/// (animal, home, food, sound)
const ANIMALS: [[&str; 4]; 30] = [
    ["cat", "attic", "mice", "purrs"],
    ["dog", "kennel", "bones", "barks"],
    ["horse", "stable", "oats", "neighs"],
    ["cow", "barn", "grass", "moos"],
    ["goat", "hillside", "thistles", "bleats"],
    ["sheep", "meadow", "clover", "baas"],
    ["pig", "sty", "acorns", "grunts"],
    ["duck", "pond", "snails", "quacks"],
    ["goose", "lake", "weeds", "honks"],
    ["owl", "oak", "voles", "hoots"],
    ["parrot", "cage", "seeds", "squawks"],
    ["rabbit", "burrow", "carrots", "thumps"],
    ["fox", "den", "hens", "yelps"],
    ["wolf", "woods", "elk", "howls"],
    ["bear", "cave", "berries", "growls"],
    ["frog", "marsh", "flies", "croaks"],
    ["hen", "coop", "corn", "clucks"],
    ["donkey", "paddock", "hay", "brays"],
    ["crow", "fence", "worms", "caws"],
    ["swan", "reeds", "pondweed", "hisses"],
    ["lion", "enclosure", "zebras", "roars"],
    ["mouse", "cellar", "cheese", "squeaks"],
    ["bee", "orchard", "nectar", "buzzes"],
    ["ferret", "hutch", "eggs", "chatters"],
    ["tortoise", "greenhouse", "lettuce", "sleeps"],
    ["lizard", "terrarium", "crickets", "basks"],
    ["canary", "aviary", "millet", "sings"],
    ["otter", "riverbank", "trout", "whistles"],
    ["badger", "sett", "grubs", "snuffles"],
    ["hedgehog", "hedgerow", "beetles", "snorts"],
];

const FOODS: [&str; 30] = [
    "apples", "pears", "plums", "cherries", "figs", "dates", "olives", "rice", "beans", "lentils", "onions",
    "leeks", "turnips", "potatoes", "peaches", "melons", "almonds", "walnuts", "oysters", "mussels", "salmon",
    "pancakes", "dumplings", "noodles", "porridge", "cabbage", "mushrooms", "apricots", "radishes", "chestnuts",
];

const COLORS: [&str; 12] =
    ["red", "blue", "green", "yellow", "black", "white", "grey", "brown", "purple", "orange", "golden", "silver"];
const MONTHS: [&str; 12] = [
    "january", "february", "march", "april", "may", "june", "july", "august", "september", "october",
    "november", "december",
];
const DAYS: [&str; 7] = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const SEASONS: [&str; 4] = ["spring", "summer", "autumn", "winter"];
const INSTRUMENTS: [&str; 15] = [
    "flute", "fiddle", "harp", "drum", "lute", "horn", "trumpet", "piano", "organ", "cello", "guitar", "banjo",
    "oboe", "clarinet", "bagpipe",
];
const SPORTS: [&str; 12] = [
    "chess", "archery", "rowing", "fencing", "wrestling", "cricket", "tennis", "hockey", "football", "swimming",
    "running", "skating",
];
const REGIONS: [&str; 8] = ["northern", "southern", "eastern", "western", "central", "coastal", "highland", "lowland"];

const SYLLABLES: [&str; 48] = [
    "ka", "lo", "mi", "ren", "tha", "bor", "vel", "sun", "dra", "pe", "li", "gar", "tor", "ny", "es", "an", "wen",
    "qui", "zo", "mar", "el", "ba", "cor", "di", "fen", "hal", "is", "jor", "ku", "len", "mo", "nar", "ol", "pra",
    "ri", "sel", "tu", "val", "wy", "ab", "bri", "cal", "dun", "ev", "fra", "gil", "hu", "im",
];
const FAMILY_SUFFIX: [&str; 8] = ["son", "ley", "ford", "ton", "wood", "er", "ing", "man"];
const TOWN_SUFFIX: [&str; 10] = ["ham", "wick", "dale", "bury", "mouth", "stead", "field", "holm", "by", "port"];

const TEMPLATES: [&str; 58] = [
    "{first} {last} is a {prof} from {town}.",
    "{first} was born in {town} in {year}.",
    "{first} works as a {prof} in the {place} of {town}.",
    "every morning {first} {verb} the {material} with a {tool}.",
    "the {product} that {first} makes are sold in {town}.",
    "{first} keeps a {color} {pet} that lives in the {pethome}.",
    "the {pet} of {first} eats {petfood} and {petsound} at night.",
    "on {day} {first} plays the {instrument} with {ffirst} {flast}.",
    "{first} and {ffirst} went to {ftown} to watch {sport}.",
    "{town} lies on the {river} river in the {region} valley.",
    "{town} was founded in {founded} by the {region} clans.",
    "in {month} {first} likes to eat {food} with {ffirst}.",
    "{ffirst} {flast} is a {fprof} and an old friend of {first}.",
    "a {prof} needs a good {tool} to make {product}.",
    "the {place} of {first} stands near the {river} river.",
    "{first} {last} learned {sport} as a child in {town}.",
    "when it rains {first} stays in the {place} and {verb} the {material}.",
    "people in {town} say that {first} makes the best {product}.",
    "{first} was born in {month} {year} and grew up in {town}.",
    "the {pet} belongs to {first} and sleeps in the {pethome}.",
    "after work {first} plays {sport} with {ffirst}.",
    "{first} buys {food} at the market of {town}.",
    "the {color} {pet} of {first} {petsound} at strangers.",
    "{ffirst} visits {first} in {town} every {season}.",
    "{first} sold {product} to {ffirst} the {fprof}.",
    "in the {place} the {tool} of {first} hangs on the wall.",
    "{first} {last} moved from {ftown} to {town} long ago.",
    "the {river} river floods {town} every {season}.",
    "{first} never lends the {tool} to {ffirst}.",
    "{first} showed {ffirst} how a {prof} {verb} the {material}.",
    "the family {last} has lived in {town} since {founded}.",
    "{first} plays the {instrument} at the feast of {town}.",
    "{first} feeds {petfood} to the {pet} every {day}.",
    "{first} made {product} for the wedding of {ffirst}.",
    "the old {prof} {first} {last} still {verb} the {material} by hand.",
    "{first} carries a {tool} and a bag of {food}.",
    "{first} met {ffirst} at the {place} in {town}.",
    "a {pet} like the one of {first} eats {petfood}.",
    "travelers from {ftown} ask {first} for {product}.",
    "the {region} road leads from {town} to the {river} river.",
    "{first} wears a {color} coat when playing the {instrument}.",
    "{first} {last} and {ffirst} {flast} share a love of {sport}.",
    "{first} is proud of the {product} from the {place}.",
    "{first} cooks {food} for the {pet} on {day}.",
    "no one in {town} {verb} the {material} like {first}.",
    "each {season} {first} cleans the {tool} in the {river} river.",
    "{ffirst} lent {first} a {instrument} in {month}.",
    "the {prof} {first} was born in {year} in the {region} valley.",
    "{first} goes fishing on the {river} river with {ffirst}.",
    "{first} paints the {place} {color} every {season}.",
    "the {pet} of {first} chases the {fpet} of {ffirst}.",
    "{first} trades {product} for the {fproduct} of {ffirst}.",
    "{first} writes letters to {ffirst} in {ftown}.",
    "{first} likes {food} more than any other food.",
    "at the fair of {town} {first} won a prize for {product}.",
    "the {place} in {town} belongs to {first} {last}.",
    "{first} sings while the {pet} {petsound}.",
    "in {year} {first} built a {place} near {town}.",
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

struct Town {
    name: String,
    river: usize,
    region: usize,
    founded: u32,
}

struct Person {
    first: String,
    family: usize,
    trade: usize,
    town: usize,
    year: u32,
    month: usize,
    pet: usize,
    color: usize,
    food: usize,
    instrument: usize,
    sport: usize,
    friend: usize,
}

struct World {
    families: Vec<String>,
    rivers: Vec<String>,
    towns: Vec<Town>,
    people: Vec<Person>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn unique_names(rng: &mut Rng, n: usize, syllables: (usize, usize), suffixes: &[&str], taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = syllables.0 + rng.below(syllables.1 - syllables.0 + 1);
        let mut name: String = (0..k).map(|_| SYLLABLES[rng.below(SYLLABLES.len())]).collect();
        if !suffixes.is_empty() {
            name.push_str(suffixes[rng.below(suffixes.len())]);
        }
        let name = capitalize(&name);
        if taken.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let mut rng = Rng::new(WORLD_SEED);
        let mut taken = HashSet::new();
        let families = unique_names(&mut rng, N_FAMILIES, (1, 2), &FAMILY_SUFFIX, &mut taken);
        let rivers = unique_names(&mut rng, N_RIVERS, (2, 2), &[], &mut taken);
        let town_names = unique_names(&mut rng, N_TOWNS, (1, 2), &TOWN_SUFFIX, &mut taken);
        let towns = town_names
            .into_iter()
            .map(|name| Town {
                name,
                river: rng.below(N_RIVERS),
                region: rng.below(REGIONS.len()),
                founded: 900 + rng.below(800) as u32,
            })
            .collect();
        let firsts = unique_names(&mut rng, N_PEOPLE, (2, 3), &[], &mut taken);
        let people = firsts
            .into_iter()
            .enumerate()
            .map(|(i, first)| Person {
                first,
                family: rng.below(N_FAMILIES),
                trade: rng.below(TRADES.len()),
                town: rng.below(N_TOWNS),
                year: 1700 + rng.below(300) as u32,
                month: rng.below(MONTHS.len()),
                pet: rng.below(ANIMALS.len()),
                color: rng.below(COLORS.len()),
                food: rng.below(FOODS.len()),
                instrument: rng.below(INSTRUMENTS.len()),
                sport: rng.below(SPORTS.len()),
                friend: (i + 1 + rng.below(N_PEOPLE - 1)) % N_PEOPLE,
            })
            .collect();
        World { families, rivers, towns, people }
    })
}

fn fill(slot: &str, w: &World, p: &Person, rng: &mut Rng) -> String {
    let f = &w.people[p.friend];
    let town = &w.towns[p.town];
    match slot {
        "first" => p.first.clone(),
        "last" => w.families[p.family].clone(),
        "prof" => TRADES[p.trade][0].into(),
        "tool" => TRADES[p.trade][1].into(),
        "place" => TRADES[p.trade][2].into(),
        "material" => TRADES[p.trade][3].into(),
        "verb" => TRADES[p.trade][4].into(),
        "product" => TRADES[p.trade][5].into(),
        "town" => town.name.clone(),
        "river" => w.rivers[town.river].clone(),
        "region" => REGIONS[town.region].into(),
        "founded" => town.founded.to_string(),
        "year" => p.year.to_string(),
        "month" => MONTHS[p.month].into(),
        "pet" => ANIMALS[p.pet][0].into(),
        "pethome" => ANIMALS[p.pet][1].into(),
        "petfood" => ANIMALS[p.pet][2].into(),
        "petsound" => ANIMALS[p.pet][3].into(),
        "color" => COLORS[p.color].into(),
        "food" => FOODS[p.food].into(),
        "instrument" => INSTRUMENTS[p.instrument].into(),
        "sport" => SPORTS[p.sport].into(),
        "day" => DAYS[rng.below(DAYS.len())].into(),
        "season" => SEASONS[rng.below(SEASONS.len())].into(),
        "ffirst" => f.first.clone(),
        "flast" => w.families[f.family].clone(),
        "fprof" => TRADES[f.trade][0].into(),
        "fproduct" => TRADES[f.trade][5].into(),
        "fpet" => ANIMALS[f.pet][0].into(),
        "ftown" => w.towns[f.town].name.clone(),
        other => unreachable!("unknown slot {other}"),
    }
}

fn render(template: &str, w: &World, p: &Person, rng: &mut Rng) -> String {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').expect("unclosed slot") + open;
        out.push_str(&fill(&rest[open + 1..close], w, p, rng));
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    capitalize(&out)
}

/// Generates `n_docs` documents. Each document introduces one person and
/// then says 4 to 8 more things about them.
pub fn gen_grammar_text(seed: u64, n_docs: usize) -> Result<Vec<String>, CorpusError> {
    if n_docs == 0 {
        return Err(CorpusError::InvalidParams("n_docs must be >= 1".into()));
    }
    let w = world();
    let mut rng = Rng::stream(seed, &[0x7E47]);
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        let p = &w.people[rng.below(w.people.len())];
        let n_more = 4 + rng.below(5);
        let mut sentences = vec![render(TEMPLATES[0], w, p, &mut rng)];
        for _ in 0..n_more {
            let t = TEMPLATES[1 + rng.below(TEMPLATES.len() - 1)];
            sentences.push(render(t, w, p, &mut rng));
        }
        docs.push(sentences.join(" "));
    }
    Ok(docs)
}

/// Size summary of the fixed grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarStats {
    pub templates: usize,
    /// Distinct words the grammar can emit: template words, slot fillers,
    /// generated names and years.
    pub lexicon: usize,
    /// The common-word part of the lexicon (no generated names or numbers).
    pub common_words: usize,
    pub people: usize,
    pub towns: usize,
}

impl GrammarStats {
    pub fn get() -> Self {
        let mut words: BTreeSet<String> = BTreeSet::new();
        for t in TEMPLATES {
            for tok in t.split_whitespace() {
                if !tok.contains('{') {
                    words.insert(tok.trim_end_matches('.').to_string());
                }
            }
        }
        let lists: [&[&str]; 8] = [&FOODS, &COLORS, &MONTHS, &DAYS, &SEASONS, &INSTRUMENTS, &SPORTS, &REGIONS];
        for l in lists {
            words.extend(l.iter().map(|s| s.to_string()));
        }
        for t in TRADES {
            words.extend(t.iter().map(|s| s.to_string()));
        }
        for a in ANIMALS {
            words.extend(a.iter().map(|s| s.to_string()));
        }
        let common_words = words.len();
        let w = world();
        words.extend(w.families.iter().cloned());
        words.extend(w.rivers.iter().cloned());
        words.extend(w.towns.iter().map(|t| t.name.clone()));
        words.extend(w.towns.iter().map(|t| t.founded.to_string()));
        words.extend(w.people.iter().map(|p| p.first.clone()));
        words.extend(w.people.iter().map(|p| p.year.to_string()));
        Self { templates: TEMPLATES.len(), lexicon: words.len(), common_words, people: N_PEOPLE, towns: N_TOWNS }
    }
}

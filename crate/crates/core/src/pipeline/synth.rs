//! Templated corpus with train, validation and unseen-domain splits.
//!
//! Every dialogue ends on a user turn that is either a knowledge question or
//! an API request. Both kinds share the same framing and sentence shape, so
//! only the content words (a knowledge topic or a schema intent/slot) decide
//! the label. Contexts often mention a second entity of the same domain
//! before the final turn, and every entity carries several documents that
//! differ only in topic.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{
    write_json, CorpusError, KnowledgeBase, KnowledgeSnippet, SchemaCatalog, SchemaDescription,
    SchemaKind, SchemaRef, SnippetKey, TurnLabel,
};
use crate::neural::SeededRng;

/// Corpus shape: domains x entities per domain x documents per entity, plus
/// the number of training dialogues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub domains: usize,
    pub entities: usize,
    pub docs: usize,
    pub dialogues: usize,
}

impl SynthSizes {
    pub fn snippets(&self) -> usize {
        self.domains * self.entities * self.docs
    }

    /// Dialogues in the validation and unseen splits.
    pub fn held_out_dialogues(&self) -> usize {
        (self.dialogues / 4).max(1)
    }
}

/// Parses `DxExK` (dialogue count left at 0 for the caller to fill).
impl FromStr for SynthSizes {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let nums = parts
            .iter()
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("bad sizes {s:?}: {e}"))?;
        match nums[..] {
            [d, e, k] if d >= 1 && e >= 1 && k >= 1 => Ok(Self {
                domains: d,
                entities: e,
                docs: k,
                dialogues: 0,
            }),
            _ => Err(format!("sizes must be DxExK with every factor >= 1, got {s:?}")),
        }
    }
}

impl fmt::Display for SynthSizes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.domains, self.entities, self.docs)
    }
}

struct Topic {
    phrase: String,
    title: String,
    /// `{e}` is the entity name, `{n}` a number.
    body: String,
}

struct ApiAct {
    name: String,
    description: String,
    /// `{n}` is a number.
    phrase: String,
}

struct Theme {
    domain: String,
    suffixes: Vec<String>,
    topics: Vec<Topic>,
    intents: Vec<ApiAct>,
    slots: Vec<ApiAct>,
}

type TopicRow = (&'static str, &'static str, &'static str);
type ActRow = (&'static str, &'static str, &'static str);

struct ThemeRow {
    domain: &'static str,
    suffixes: [&'static str; 3],
    topics: [TopicRow; 6],
    intents: [ActRow; 2],
    slots: [ActRow; 2],
}

const THEMES: [ThemeRow; 8] = [
    ThemeRow {
        domain: "hotel",
        suffixes: ["Lodge", "Inn", "Hotel"],
        topics: [
            ("the parking", "Is there parking?", "Parking at {e} costs {n} pounds per day."),
            ("the wifi", "Is wifi included?", "Wifi at {e} is free for {n} devices per room."),
            ("pets", "Are pets allowed?", "Pets up to {n} kilos are welcome at {e}."),
            ("the breakfast", "Is breakfast served?", "Breakfast at {e} is served until {n} am."),
            ("the pool", "Is there a pool?", "The pool at {e} is open {n} hours a day."),
            ("the checkout", "When is checkout?", "Checkout at {e} is at {n} am."),
        ],
        intents: [
            ("book_room", "reserve a room at the hotel", "booking a room"),
            ("cancel_stay", "cancel an existing hotel stay", "cancelling my stay"),
        ],
        slots: [
            ("stay_nights", "number of nights to stay", "for {n} nights"),
            ("room_count", "number of rooms needed", "with {n} rooms"),
        ],
    },
    ThemeRow {
        domain: "restaurant",
        suffixes: ["Kitchen", "Grill", "Bistro"],
        topics: [
            ("vegan dishes", "Are there vegan dishes?", "{e} has {n} vegan dishes on the menu."),
            ("the dress code", "Is there a dress code?", "The dress code at {e} is smart casual after {n} pm."),
            ("outdoor seating", "Is there outdoor seating?", "{e} has {n} outdoor tables."),
            ("the kids menu", "Is there a kids menu?", "The kids menu at {e} costs {n} pounds."),
            ("corkage", "Can I bring wine?", "Corkage at {e} is {n} pounds per bottle."),
            ("delivery", "Do they deliver?", "{e} delivers within {n} miles."),
        ],
        intents: [
            ("reserve_table", "reserve a table at the restaurant", "reserving a table"),
            ("order_takeaway", "order food for pickup", "ordering takeaway"),
        ],
        slots: [
            ("party_size", "number of diners in the party", "for {n} diners"),
            ("start_time", "start time of the meal", "at {n} pm"),
        ],
    },
    ThemeRow {
        domain: "museum",
        suffixes: ["Museum", "Gallery", "Gardens"],
        topics: [
            ("the audio guide", "Is there an audio guide?", "The audio guide at {e} covers {n} rooms."),
            ("photography", "Can I take photos?", "Photography at {e} is allowed in {n} halls."),
            ("wheelchair access", "Is it wheelchair accessible?", "{e} has {n} step free entrances."),
            ("guided tours", "Are there guided tours?", "Guided tours at {e} start every {n} minutes."),
            ("the gift shop", "Is there a gift shop?", "The gift shop at {e} closes at {n} pm."),
            ("the lockers", "Are there lockers?", "Lockers at {e} cost {n} coins."),
        ],
        intents: [
            ("buy_entry", "buy entry passes for the museum", "buying entry"),
            ("plan_visit", "plan a visit to the museum", "planning a visit"),
        ],
        slots: [
            ("visitor_count", "number of visitors", "for {n} visitors"),
            ("visit_date", "date of the visit", "on the {n} th"),
        ],
    },
    ThemeRow {
        domain: "train",
        suffixes: ["Express", "Line", "Railway"],
        topics: [
            ("bicycles", "Can I bring a bicycle?", "{e} carries {n} bicycles per train."),
            ("the luggage", "Is there a luggage limit?", "{e} allows {n} bags per passenger."),
            ("the food trolley", "Is there a food trolley?", "The food trolley on {e} runs every {n} stops."),
            ("the quiet coach", "Is there a quiet coach?", "{e} has a quiet coach in car {n}."),
            ("power sockets", "Are there power sockets?", "{e} has {n} sockets per carriage."),
            ("the toilets", "Are there toilets?", "{e} has toilets in {n} carriages."),
        ],
        intents: [
            ("purchase_fare", "purchase a train fare", "purchasing a fare"),
            ("change_journey", "change a booked journey", "changing my journey"),
        ],
        slots: [
            ("departure_hour", "hour of departure", "leaving at {n}"),
            ("traveller_count", "number of travellers", "for {n} travellers"),
        ],
    },
    ThemeRow {
        domain: "taxi",
        suffixes: ["Cabs", "Cars", "Taxis"],
        topics: [
            ("child seats", "Are child seats available?", "{e} provides {n} child seats on request."),
            ("card payment", "Can I pay by card?", "{e} takes cards for fares above {n} pounds."),
            ("airport runs", "Do they go to the airport?", "{e} charges {n} pounds for airport runs."),
            ("accessible vans", "Are there accessible vans?", "{e} runs {n} accessible vans."),
            ("night fares", "Are night fares higher?", "Night fares at {e} start at {n} pm."),
            ("the waiting fee", "Is there a waiting fee?", "{e} charges {n} pence per minute of waiting."),
        ],
        intents: [
            ("hire_cab", "hire a cab for a ride", "hiring a cab"),
            ("schedule_pickup", "schedule a later pickup", "scheduling a pickup"),
        ],
        slots: [
            ("pickup_hour", "hour of the pickup", "around {n} o clock"),
            ("passenger_number", "number of passengers", "for {n} passengers"),
        ],
    },
    ThemeRow {
        domain: "gym",
        suffixes: ["Fitness", "Studio", "Club"],
        topics: [
            ("the sauna", "Is there a sauna?", "The sauna at {e} holds {n} people."),
            ("towels", "Are towels provided?", "{e} lends towels for {n} pence."),
            ("the showers", "Are there showers?", "{e} has {n} showers in each changing room."),
            ("yoga classes", "Are there yoga classes?", "{e} runs {n} yoga classes a week."),
            ("day passes", "Are day passes sold?", "A day pass at {e} costs {n} pounds."),
            ("trainers", "Are there personal trainers?", "{e} employs {n} personal trainers."),
        ],
        intents: [
            ("join_membership", "sign up for a gym membership", "joining as a member"),
            ("freeze_membership", "pause an active membership", "freezing my membership"),
        ],
        slots: [
            ("plan_months", "length of the plan in months", "for {n} months"),
            ("member_count", "number of members joining", "for {n} members"),
        ],
    },
    ThemeRow {
        domain: "cinema",
        suffixes: ["Pictures", "Screens", "Picturehouse"],
        topics: [
            ("3d screenings", "Are there 3d screenings?", "{e} shows {n} 3d films a day."),
            ("the popcorn", "Is popcorn sold?", "Popcorn at {e} costs {n} pounds."),
            ("subtitles", "Are films subtitled?", "{e} has subtitled shows on {n} days."),
            ("recliner seats", "Are there recliner seats?", "{e} has {n} recliner rows."),
            ("student discount", "Is there a student discount?", "{e} gives students {n} percent off."),
            ("late shows", "Are there late shows?", "The last show at {e} starts at {n} pm."),
        ],
        intents: [
            ("purchase_seats", "purchase seats for a film", "purchasing seats"),
            ("refund_order", "refund a film order", "refunding my order"),
        ],
        slots: [
            ("seat_number", "number of seats wanted", "for {n} seats"),
            ("show_hour", "hour of the show", "for the {n} pm show"),
        ],
    },
    ThemeRow {
        domain: "spa",
        suffixes: ["Spa", "Retreat", "Baths"],
        topics: [
            ("massages", "Are massages offered?", "{e} offers {n} kinds of massage."),
            ("the robes", "Are robes provided?", "{e} provides robes in {n} sizes."),
            ("the steam room", "Is there a steam room?", "The steam room at {e} seats {n} guests."),
            ("facials", "Are facials offered?", "A facial at {e} lasts {n} minutes."),
            ("couples packages", "Are there couples packages?", "{e} sells {n} couples packages."),
            ("the hot tub", "Is there a hot tub?", "The hot tub at {e} is kept at {n} degrees."),
        ],
        intents: [
            ("schedule_treatment", "schedule a spa treatment", "scheduling a treatment"),
            ("gift_voucher", "send a spa gift voucher", "sending a gift voucher"),
        ],
        slots: [
            ("session_minutes", "length of the session in minutes", "lasting {n} minutes"),
            ("guest_number", "number of guests attending", "for {n} guests"),
        ],
    },
];

const BASE_NAMES: [&str; 24] = [
    "Alder", "Birch", "Cedar", "Dove", "Elm", "Fern", "Grove", "Hazel", "Iris", "Juniper",
    "Kestrel", "Laurel", "Maple", "Nettle", "Oak", "Pine", "Quill", "Rowan", "Sage", "Thorn",
    "Umber", "Vale", "Willow", "Yew",
];

const FRAMES: [&str; 6] = ["hello,", "excuse me,", "one more thing,", "quick question,", "also,", "by the way,"];
const LEADS: [&str; 4] = ["i need help with", "i am asking about", "what about", "tell me about"];
const ACKS: [&str; 3] = ["sure.", "let me check.", "good question."];

/// Pronounceable filler word for themes beyond the hand-written ones.
fn pseudo_word(index: usize, salt: usize) -> String {
    const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "t", "v"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    let mut x = index * 7919 + salt * 104_729 + 13;
    let mut w = String::new();
    for _ in 0..3 {
        w.push_str(ONSETS[x % ONSETS.len()]);
        x /= ONSETS.len();
        w.push_str(VOWELS[x % VOWELS.len()]);
        x = x / VOWELS.len() + index + 3;
    }
    w
}

fn theme(index: usize) -> Theme {
    let own = |s: &str| s.to_string();
    if let Some(row) = THEMES.get(index) {
        return Theme {
            domain: own(row.domain),
            suffixes: row.suffixes.iter().map(|s| own(s)).collect(),
            topics: row
                .topics
                .iter()
                .map(|(p, t, b)| Topic {
                    phrase: own(p),
                    title: own(t),
                    body: own(b),
                })
                .collect(),
            intents: row.intents.iter().map(act).collect(),
            slots: row.slots.iter().map(act).collect(),
        };
    }
    let w = |salt: usize| pseudo_word(index, salt);
    Theme {
        domain: format!("{}{index}", w(1)),
        suffixes: vec![w(2), w(3), w(4)],
        topics: Vec::new(),
        intents: vec![
            ApiAct {
                name: format!("book_{}", w(5)),
                description: format!("book a {}", w(5)),
                phrase: format!("booking a {}", w(5)),
            },
            ApiAct {
                name: format!("cancel_{}", w(6)),
                description: format!("cancel a {}", w(6)),
                phrase: format!("cancelling a {}", w(6)),
            },
        ],
        slots: vec![
            ApiAct {
                name: format!("{}_count", w(7)),
                description: format!("number of {}", w(7)),
                phrase: format!("for {{n}} {}", w(7)),
            },
            ApiAct {
                name: format!("{}_hour", w(8)),
                description: format!("hour of the {}", w(8)),
                phrase: format!("at {{n}} {}", w(8)),
            },
        ],
    }
}

fn act(row: &ActRow) -> ApiAct {
    ApiAct {
        name: row.0.to_string(),
        description: row.1.to_string(),
        phrase: row.2.to_string(),
    }
}

impl Theme {
    /// Topic `k`; hand-written topics first, generated ones after.
    fn topic(&self, k: usize, theme_index: usize) -> Topic {
        if let Some(t) = self.topics.get(k) {
            return Topic {
                phrase: t.phrase.clone(),
                title: t.title.clone(),
                body: t.body.clone(),
            };
        }
        let w = pseudo_word(theme_index * 131 + k, 9);
        Topic {
            phrase: format!("the {w}"),
            title: format!("Is there a {w}?"),
            body: format!("The {w} at {{e}} takes {{n}} minutes."),
        }
    }

    fn entity_name(&self, e: usize, order: &[usize]) -> String {
        let slot = order[e % order.len()];
        let base = BASE_NAMES[slot];
        let suffix = &self.suffixes[e % self.suffixes.len()];
        match e / BASE_NAMES.len() {
            0 => format!("{base} {suffix}"),
            round => format!("{base} {} {suffix}", pseudo_word(round, 11)),
        }
    }
}

fn fill(template: &str, entity: &str, n: u32) -> String {
    template.replace("{e}", entity).replace("{n}", &n.to_string())
}

/// One split's world: knowledge base and schema over a set of themes.
struct World {
    themes: Vec<(usize, Theme)>,
    names: Vec<Vec<String>>,
    kb: KnowledgeBase,
    schema: SchemaCatalog,
}

fn build_world(theme_ids: &[usize], sizes: &SynthSizes, rng: &mut SeededRng) -> Result<World, CorpusError> {
    let mut snippets = Vec::new();
    let mut descriptions = Vec::new();
    let mut themes = Vec::new();
    let mut names = Vec::new();
    for &ti in theme_ids {
        let th = theme(ti);
        let mut order: Vec<usize> = (0..BASE_NAMES.len()).collect();
        order.shuffle(rng);
        let ents: Vec<String> = (0..sizes.entities).map(|e| th.entity_name(e, &order)).collect();
        for (e, name) in ents.iter().enumerate() {
            for k in 0..sizes.docs {
                let topic = th.topic(k, ti);
                let n: u32 = rng.random_range(2..30);
                snippets.push(KnowledgeSnippet {
                    domain: th.domain.clone(),
                    entity_id: Some(e.to_string()),
                    entity_name: Some(name.clone()),
                    doc_id: k.to_string(),
                    title: topic.title,
                    body: fill(&topic.body, name, n),
                });
            }
        }
        for (kind, acts) in [(SchemaKind::Intent, &th.intents), (SchemaKind::Slot, &th.slots)] {
            for a in acts {
                descriptions.push(SchemaDescription {
                    service: th.domain.clone(),
                    kind,
                    name: a.name.clone(),
                    description: a.description.clone(),
                });
            }
        }
        names.push(ents);
        themes.push((ti, th));
    }
    Ok(World {
        themes,
        names,
        kb: KnowledgeBase::new(snippets)?,
        schema: SchemaCatalog::new(descriptions)?,
    })
}

struct SplitData {
    logs: Value,
    labels: Vec<TurnLabel>,
    api: Vec<Option<Vec<SchemaRef>>>,
}

fn build_dialogues(world: &World, sizes: &SynthSizes, count: usize, rng: &mut SeededRng) -> SplitData {
    let mut logs = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut api = Vec::with_capacity(count);
    for _ in 0..count {
        let d = rng.random_range(0..world.themes.len());
        let (ti, th) = &world.themes[d];
        let ents = &world.names[d];
        let e = rng.random_range(0..ents.len());
        let knowledge_turn = rng.random_bool(0.5);
        let frame = FRAMES.choose(rng).expect("non-empty");
        let lead = LEADS.choose(rng).expect("non-empty");
        let mut turns: Vec<Value> = Vec::new();
        // An earlier mention of another entity of the domain, named once.
        if ents.len() > 1 && rng.random_bool(0.5) {
            let mut o = rng.random_range(0..ents.len() - 1);
            if o >= e {
                o += 1;
            }
            turns.push(json!({"speaker": "U", "text": format!("hi, i was looking at {}.", ents[o])}));
            turns.push(json!({"speaker": "S", "text": format!("that is a popular {}. anything else?", th.domain)}));
        } else {
            turns.push(json!({"speaker": "U", "text": format!("hi, i have a question about a {}.", th.domain)}));
            turns.push(json!({"speaker": "S", "text": "sure, go ahead."}));
        }
        let n: u32 = rng.random_range(2..10);
        // Neither the ending nor the presence of a number reveals the label.
        let end = if rng.random_bool(0.5) { '?' } else { '.' };
        let tail = if rng.random_bool(0.5) { format!(" for {n} of us") } else { String::new() };
        if knowledge_turn {
            let k = rng.random_range(0..sizes.docs);
            let topic = th.topic(k, *ti);
            turns.push(json!({"speaker": "U", "text": format!("{frame} {lead} {}{tail} at {}{end}", topic.phrase, ents[e])}));
            let key = SnippetKey {
                domain: th.domain.clone(),
                entity_id: Some(e.to_string()),
                doc_id: k.to_string(),
            };
            let body = &world.kb.get(world.kb.resolve(&key).expect("built above")).body;
            let ack = ACKS.choose(rng).expect("non-empty");
            labels.push(TurnLabel {
                target: true,
                knowledge: vec![key],
                response: Some(format!("{ack} {body}")),
                api_positives: None,
            });
            api.push(None);
        } else {
            let intent = th.intents.choose(rng).expect("non-empty");
            let slot = th.slots.choose(rng).expect("non-empty");
            let mut refs = vec![SchemaRef {
                service: th.domain.clone(),
                kind: SchemaKind::Intent,
                name: intent.name.clone(),
            }];
            let request = if rng.random_bool(0.5) {
                refs.push(SchemaRef {
                    service: th.domain.clone(),
                    kind: SchemaKind::Slot,
                    name: slot.name.clone(),
                });
                format!("{} {}", intent.phrase, fill(&slot.phrase, "", n))
            } else {
                format!("{}{tail}", intent.phrase)
            };
            turns.push(json!({"speaker": "U", "text": format!("{frame} {lead} {request} at {}{end}", ents[e])}));
            labels.push(TurnLabel::default());
            api.push(Some(refs));
        }
        logs.push(Value::Array(turns));
    }
    SplitData {
        logs: Value::Array(logs),
        labels,
        api,
    }
}

fn write_split(dir: &Path, world: &World, data: &SplitData) -> Result<(), CorpusError> {
    write_json(&dir.join("logs.json"), &data.logs)?;
    write_json(
        &dir.join("labels.json"),
        &Value::Array(data.labels.iter().map(TurnLabel::to_json).collect()),
    )?;
    write_json(&dir.join("knowledge.json"), &world.kb.to_json())?;
    write_json(&dir.join("schema.json"), &world.schema.to_json())?;
    write_json(
        &dir.join("api_positives.json"),
        &serde_json::to_value(&data.api).expect("refs serialize"),
    )
}

/// Split directory names written by [`gen_synthetic_corpus`].
pub const SPLITS: [&str; 3] = ["train", "val", "unseen"];

/// Writes `train/`, `val/` and `unseen/` under `out`. Train and validation
/// share the first `domains` themes; the unseen split uses the next
/// `domains` themes, so its domains never occur in training.
pub fn gen_synthetic_corpus(out: &Path, seed: u64, sizes: &SynthSizes) -> Result<(), CorpusError> {
    if sizes.domains == 0 || sizes.entities == 0 || sizes.docs == 0 || sizes.dialogues == 0 {
        return Err(CorpusError::Invalid(format!(
            "synthetic sizes must all be >= 1, got {sizes} with {} dialogues",
            sizes.dialogues
        )));
    }
    let stream = |s: u64| {
        let mut rng = SeededRng::seed_from_u64(seed);
        rng.set_stream(s);
        rng
    };
    let seen: Vec<usize> = (0..sizes.domains).collect();
    let unseen: Vec<usize> = (sizes.domains..2 * sizes.domains).collect();
    let mut rng = stream(0);
    let seen_world = build_world(&seen, sizes, &mut rng)?;
    let unseen_world = build_world(&unseen, sizes, &mut rng)?;
    let held = sizes.held_out_dialogues();
    let plan = [
        (&seen_world, sizes.dialogues, 1),
        (&seen_world, held, 2),
        (&unseen_world, held, 3),
    ];
    for (name, (world, count, s)) in SPLITS.iter().zip(plan) {
        let data = build_dialogues(world, sizes, count, &mut stream(s));
        write_split(&out.join(name), world, &data)?;
    }
    Ok(())
}

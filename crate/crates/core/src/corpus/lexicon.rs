//! Closed lexicon of the synthetic grammar.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verb {
    pub base: &'static str,
    pub third: &'static str,
    pub past: &'static str,
    pub gerund: &'static str,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Noun {
    pub singular: &'static str,
    pub plural: &'static str,
}

const fn v(base: &'static str, third: &'static str, past: &'static str, gerund: &'static str) -> Verb {
    Verb {
        base,
        third,
        past,
        gerund,
    }
}

const fn n(singular: &'static str, plural: &'static str) -> Noun {
    Noun { singular, plural }
}

pub const VERBS: [Verb; 40] = [
    v("attend", "attends", "attended", "attending"),
    v("sign", "signs", "signed", "signing"),
    v("join", "joins", "joined", "joining"),
    v("write", "writes", "wrote", "writing"),
    v("cook", "cooks", "cooked", "cooking"),
    v("paint", "paints", "painted", "painting"),
    v("visit", "visits", "visited", "visiting"),
    v("watch", "watches", "watched", "watching"),
    v("open", "opens", "opened", "opening"),
    v("close", "closes", "closed", "closing"),
    v("clean", "cleans", "cleaned", "cleaning"),
    v("fix", "fixes", "fixed", "fixing"),
    v("build", "builds", "built", "building"),
    v("buy", "buys", "bought", "buying"),
    v("sell", "sells", "sold", "selling"),
    v("find", "finds", "found", "finding"),
    v("lose", "loses", "lost", "losing"),
    v("break", "breaks", "broke", "breaking"),
    v("bring", "brings", "brought", "bringing"),
    v("carry", "carries", "carried", "carrying"),
    v("drive", "drives", "drove", "driving"),
    v("take", "takes", "took", "taking"),
    v("see", "sees", "saw", "seeing"),
    v("draw", "draws", "drew", "drawing"),
    v("hold", "holds", "held", "holding"),
    v("keep", "keeps", "kept", "keeping"),
    v("leave", "leaves", "left", "leaving"),
    v("make", "makes", "made", "making"),
    v("move", "moves", "moved", "moving"),
    v("order", "orders", "ordered", "ordering"),
    v("pack", "packs", "packed", "packing"),
    v("print", "prints", "printed", "printing"),
    v("push", "pushes", "pushed", "pushing"),
    v("pull", "pulls", "pulled", "pulling"),
    v("check", "checks", "checked", "checking"),
    v("choose", "chooses", "chose", "choosing"),
    v("catch", "catches", "caught", "catching"),
    v("wash", "washes", "washed", "washing"),
    v("fill", "fills", "filled", "filling"),
    v("lift", "lifts", "lifted", "lifting"),
];

pub const NOUNS: [Noun; 30] = [
    n("party", "parties"),
    n("paper", "papers"),
    n("wedding", "weddings"),
    n("letter", "letters"),
    n("dinner", "dinners"),
    n("house", "houses"),
    n("museum", "museums"),
    n("movie", "movies"),
    n("door", "doors"),
    n("window", "windows"),
    n("car", "cars"),
    n("box", "boxes"),
    n("book", "books"),
    n("bag", "bags"),
    n("chair", "chairs"),
    n("table", "tables"),
    n("key", "keys"),
    n("ticket", "tickets"),
    n("bottle", "bottles"),
    n("picture", "pictures"),
    n("plate", "plates"),
    n("bike", "bikes"),
    n("lamp", "lamps"),
    n("phone", "phones"),
    n("card", "cards"),
    n("map", "maps"),
    n("cup", "cups"),
    n("shirt", "shirts"),
    n("gift", "gifts"),
    n("report", "reports"),
];

/// Hand-picked leading pairs `(verb, noun)`; the rest of the inventory is
/// enumerated after them.
const CURATED: [(usize, usize); 8] = [
    (0, 0), // attend the party
    (1, 1), // sign the paper
    (2, 2), // join the wedding
    (3, 3), // write the letter
    (4, 4), // cook the dinner
    (5, 5), // paint the house
    (6, 6), // visit the museum
    (7, 7), // watch the movie
];

/// Largest verb/object inventory the lexicon supports.
pub const MAX_VERB_OBJECTS: usize = VERBS.len() * NOUNS.len();

/// First `count` verb/object pairs in canonical order.
pub fn verb_object_inventory(count: usize) -> Vec<(usize, usize)> {
    assert!(count <= MAX_VERB_OBJECTS);
    let mut out: Vec<(usize, usize)> = CURATED.to_vec();
    'outer: for shift in 0..NOUNS.len() {
        for verb in 0..VERBS.len() {
            if out.len() >= count {
                break 'outer;
            }
            let pair = (verb, (verb + shift) % NOUNS.len());
            if !out.contains(&pair) {
                out.push(pair);
            }
        }
    }
    out.truncate(count);
    out
}

pub const PRONOUNS: [&str; 7] = ["i", "we", "you", "all", "he", "she", "they"];
pub const AUXILIARIES: [&str; 11] = [
    "do", "does", "did", "will", "am", "is", "are", "was", "were", "be", "not",
];
pub const DETERMINER: &str = "the";
pub const QUESTION_MARK: &str = "?";

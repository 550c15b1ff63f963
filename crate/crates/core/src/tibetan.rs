//! Tibetan orthographic parsing and modeling-unit vocabularies.
//!
//! A written Tibetan syllable is a horizontal run of stacks; each stack is a
//! base letter, optionally with subjoined letters and vowel signs composed
//! vertically. Modeling units come at three granularities: whole syllables,
//! horizontal syllable units (prefix / root stack / suffix / secondary
//! suffix), and individual components (base letters, subjoined letters,
//! vowel signs).
//!
//! The orthography does not pin down a single grouping algorithm, so the
//! rules here are a deterministic reading of the standard structure: the root
//! stack is the unique stack carrying a subjoined letter or a vowel sign; for
//! all-bare-consonant syllables the canonical prefix/suffix letter sets
//! disambiguate. Syllables outside these rules are rejected rather than
//! guessed at.
//!
//! Input text is taken as-is; no Unicode normalization is applied, since
//! composed/decomposed stack variants are not interchangeable here.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::TibetanError;

pub const BLANK_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["<blank>", "<unk>", "<s>", "</s>"];

/// Sentinel emitted when decoding the unk id back to text.
pub const UNK_TEXT: &str = "\u{27E8}unk\u{27E9}";

/// Modeling-unit granularity; exactly one is active per vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Granularity {
    Syllable,
    SyllableUnit,
    Component,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Syllable => "syllable",
            Granularity::SyllableUnit => "syllable_unit",
            Granularity::Component => "component",
        })
    }
}

impl std::str::FromStr for Granularity {
    type Err = TibetanError;
    fn from_str(s: &str) -> Result<Self, TibetanError> {
        match s {
            "syllable" => Ok(Granularity::Syllable),
            "syllable_unit" => Ok(Granularity::SyllableUnit),
            "component" => Ok(Granularity::Component),
            other => Err(TibetanError::BadVocabFile(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentClass {
    /// U+0F40..=U+0F6C
    BaseLetter,
    /// U+0F90..=U+0FBC
    SubjoinedLetter,
    /// U+0F71..=U+0F84
    VowelSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub ch: char,
    pub class: ComponentClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnitKind {
    Prefix,
    RootStack,
    Suffix,
    SecondarySuffix,
}

/// One horizontal position of a syllable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyllableUnit {
    pub kind: UnitKind,
    pub components: Vec<Component>,
}

impl SyllableUnit {
    pub fn text(&self) -> String {
        self.components.iter().map(|c| c.ch).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyllableParse {
    pub source: String,
    pub units: Vec<SyllableUnit>,
}

impl SyllableParse {
    /// Flattened component sequence; equals `decompose_components(source)`.
    pub fn components(&self) -> Vec<Component> {
        self.units.iter().flat_map(|u| u.components.iter().copied()).collect()
    }

    /// Concatenating unit texts reproduces the source codepoint-for-codepoint.
    pub fn recompose(&self) -> String {
        self.units.iter().map(|u| u.text()).collect()
    }
}

fn classify(ch: char) -> Option<ComponentClass> {
    match ch as u32 {
        0x0F40..=0x0F6C => Some(ComponentClass::BaseLetter),
        0x0F90..=0x0FBC => Some(ComponentClass::SubjoinedLetter),
        0x0F71..=0x0F84 => Some(ComponentClass::VowelSign),
        _ => None,
    }
}

/// The five letters that may prefix a root stack.
const PREFIXES: [char; 5] = ['ག', 'ད', 'བ', 'མ', 'འ'];
/// The ten canonical final (suffix) letters.
const SUFFIXES: [char; 10] = ['ག', 'ང', 'ད', 'ན', 'བ', 'མ', 'འ', 'ར', 'ལ', 'ས'];
/// Letters allowed as a secondary suffix.
const SECONDARY_SUFFIXES: [char; 2] = ['ས', 'ད'];

fn is_delimiter(ch: char) -> bool {
    // Tsheg, non-breaking tsheg, the shad family, and ordinary whitespace.
    matches!(ch as u32, 0x0F0B | 0x0F0C | 0x0F0D..=0x0F14) || ch.is_whitespace()
}

/// Splits text into syllables on tsheg, shad punctuation, and whitespace.
/// Empty segments are dropped; order is preserved. Non-Tibetan runs between
/// delimiters come out as single opaque segments (they map to unk later).
pub fn segment_syllables(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if is_delimiter(ch) {
            if !current.is_empty() {
                out.push(std::mem::take(&mut current));
            }
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

pub fn is_tibetan_syllable(syllable: &str) -> bool {
    !syllable.is_empty() && syllable.chars().all(|c| classify(c).is_some())
}

/// Classifies each codepoint of a syllable. Concatenating the component
/// characters reproduces the input.
pub fn decompose_components(syllable: &str) -> Result<Vec<Component>, TibetanError> {
    syllable
        .chars()
        .enumerate()
        .map(|(offset, ch)| {
            classify(ch)
                .map(|class| Component { ch, class })
                .ok_or(TibetanError::UnknownCodepoint { codepoint: ch as u32, offset })
        })
        .collect()
}

/// Groups a syllable's components into horizontal units.
pub fn decompose_units(syllable: &str) -> Result<SyllableParse, TibetanError> {
    let components = decompose_components(syllable)?;

    // Stack formation: a base letter opens a stack; subjoined letters and
    // vowel signs attach to the open stack.
    let mut stacks: Vec<Vec<Component>> = Vec::new();
    for (offset, comp) in components.iter().enumerate() {
        match comp.class {
            ComponentClass::BaseLetter => stacks.push(vec![*comp]),
            ComponentClass::SubjoinedLetter | ComponentClass::VowelSign => {
                match stacks.last_mut() {
                    Some(stack) => stack.push(*comp),
                    None => {
                        return Err(TibetanError::DanglingComponent {
                            syllable: syllable.to_string(),
                            offset,
                        })
                    }
                }
            }
        }
    }

    let stack_text = |s: &[Component]| -> String { s.iter().map(|c| c.ch).collect() };
    let ambiguous = |stacks: &[Vec<Component>], detail: &str| TibetanError::AmbiguousStructure {
        syllable: syllable.to_string(),
        detail: detail.to_string(),
        stacks: stacks.iter().map(|s| stack_text(s)).collect(),
    };

    let marked: Vec<usize> = (0..stacks.len()).filter(|&i| stacks[i].len() > 1).collect();

    // Position of the root among the stacks.
    let root: usize = match marked.len() {
        0 => {
            let bare: Vec<char> = stacks.iter().map(|s| s[0].ch).collect();
            match bare.len() {
                0 => return Err(ambiguous(&stacks, "no stacks")),
                1 => 0,
                2 => {
                    if SUFFIXES.contains(&bare[1]) {
                        0
                    } else {
                        return Err(ambiguous(
                            &stacks,
                            "second bare letter is not a canonical suffix",
                        ));
                    }
                }
                3 => {
                    if PREFIXES.contains(&bare[0]) && SUFFIXES.contains(&bare[2]) {
                        1
                    } else if SUFFIXES.contains(&bare[1]) && SECONDARY_SUFFIXES.contains(&bare[2]) {
                        0
                    } else {
                        return Err(ambiguous(
                            &stacks,
                            "three bare letters fit neither prefix-root-suffix nor root-suffix-suffix",
                        ));
                    }
                }
                4 => {
                    if PREFIXES.contains(&bare[0])
                        && SUFFIXES.contains(&bare[2])
                        && SECONDARY_SUFFIXES.contains(&bare[3])
                    {
                        1
                    } else {
                        return Err(ambiguous(
                            &stacks,
                            "four bare letters do not fit prefix-root-suffix-suffix",
                        ));
                    }
                }
                _ => return Err(ambiguous(&stacks, "too many bare letters to identify a root")),
            }
        }
        1 => marked[0],
        _ => {
            return Err(ambiguous(
                &stacks,
                "multiple stacks carry subjoined letters or vowels",
            ))
        }
    };

    if root > 1 {
        return Err(ambiguous(&stacks, "more than one stack precedes the root"));
    }
    let trailing = stacks.len() - root - 1;
    if trailing > 2 {
        return Err(ambiguous(&stacks, "more than two stacks follow the root"));
    }
    if root == 1 && marked.len() == 1 && !PREFIXES.contains(&stacks[0][0].ch) {
        return Err(ambiguous(&stacks, "letter before the root is not a canonical prefix"));
    }
    if trailing >= 1 && !SUFFIXES.contains(&stacks[root + 1][0].ch) {
        return Err(ambiguous(&stacks, "letter after the root is not a canonical suffix"));
    }
    if trailing == 2 && !SECONDARY_SUFFIXES.contains(&stacks[root + 2][0].ch) {
        return Err(ambiguous(&stacks, "final letter is not a canonical secondary suffix"));
    }

    let mut units = Vec::with_capacity(stacks.len());
    for (i, stack) in stacks.into_iter().enumerate() {
        let kind = if i == root {
            UnitKind::RootStack
        } else if i < root {
            UnitKind::Prefix
        } else if i == root + 1 {
            UnitKind::Suffix
        } else {
            UnitKind::SecondarySuffix
        };
        units.push(SyllableUnit { kind, components: stack });
    }
    Ok(SyllableParse { source: syllable.to_string(), units })
}

/// Splits one segmented syllable into unit strings at granularity `g`.
/// Opaque (non-Tibetan) segments stay whole at every granularity.
pub fn syllable_to_units(syllable: &str, g: Granularity) -> Result<Vec<String>, TibetanError> {
    if !is_tibetan_syllable(syllable) {
        return Ok(vec![syllable.to_string()]);
    }
    match g {
        Granularity::Syllable => Ok(vec![syllable.to_string()]),
        Granularity::SyllableUnit => {
            Ok(decompose_units(syllable)?.units.iter().map(|u| u.text()).collect())
        }
        Granularity::Component => {
            Ok(decompose_components(syllable)?.iter().map(|c| c.ch.to_string()).collect())
        }
    }
}

/// Bidirectional map between modeling units and dense integer ids, with
/// reserved blank/unk/sos/eos ids at 0..=3.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    granularity: Granularity,
    units: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds the vocabulary of all distinct units in `corpus` at granularity
    /// `g`, ordered by descending frequency then codepoint order, after the
    /// reserved entries. Corpus syllables that fail to parse at unit
    /// granularity are a data error and are reported as such.
    pub fn build(corpus: &str, g: Granularity) -> Result<Self, TibetanError> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for syllable in segment_syllables(corpus) {
            for unit in syllable_to_units(&syllable, g)? {
                *counts.entry(unit).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(TibetanError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut units: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        units.extend(ranked.into_iter().map(|(u, _)| u));
        Ok(Self::from_units(g, units))
    }

    fn from_units(granularity: Granularity, units: Vec<String>) -> Self {
        let index = units.iter().enumerate().map(|(i, u)| (u.clone(), i as u32)).collect();
        Vocabulary { granularity, units, index }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn size(&self) -> usize {
        self.units.len()
    }

    pub fn id_of(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn unit_of(&self, id: u32) -> Result<&str, TibetanError> {
        self.units
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(TibetanError::IdOutOfRange { id, size: self.units.len() })
    }

    /// Encodes text to ids at this vocabulary's granularity. Unknown units
    /// (including opaque non-Tibetan segments and unparseable syllables) map
    /// to unk; encoding never fails.
    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for syllable in segment_syllables(text) {
            match syllable_to_units(&syllable, self.granularity) {
                Ok(units) => {
                    for unit in units {
                        ids.push(self.id_of(&unit).unwrap_or(UNK_ID));
                    }
                }
                Err(_) => ids.push(UNK_ID),
            }
        }
        ids
    }

    /// Decodes ids back to text. Syllable-granularity units are rejoined with
    /// tsheg; finer granularities concatenate. blank/sos/eos are structural
    /// and produce no text; unk renders as the sentinel.
    pub fn decode_ids(&self, ids: &[u32]) -> Result<String, TibetanError> {
        let mut parts: Vec<&str> = Vec::new();
        for &id in ids {
            if id >= self.units.len() as u32 {
                return Err(TibetanError::IdOutOfRange { id, size: self.units.len() });
            }
            match id {
                BLANK_ID | SOS_ID | EOS_ID => {}
                UNK_ID => parts.push(UNK_TEXT),
                _ => parts.push(&self.units[id as usize]),
            }
        }
        let sep = match self.granularity {
            Granularity::Syllable => "\u{0F0B}",
            _ => "",
        };
        Ok(parts.join(sep))
    }

    /// One line per entry: `id<TAB>unit<TAB>granularity`.
    pub fn save_tsv(&self, path: &Path) -> Result<(), TibetanError> {
        let mut out = String::new();
        for (id, unit) in self.units.iter().enumerate() {
            out.push_str(&format!("{id}\t{unit}\t{}\n", self.granularity));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load_tsv(path: &Path) -> Result<Self, TibetanError> {
        let text = std::fs::read_to_string(path)?;
        let mut units = Vec::new();
        let mut granularity = None;
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (id, unit, g) = match (fields.next(), fields.next(), fields.next()) {
                (Some(id), Some(unit), Some(g)) => (id, unit, g),
                _ => {
                    return Err(TibetanError::BadVocabFile(format!(
                        "line {}: expected 3 tab-separated fields",
                        lineno + 1
                    )))
                }
            };
            let id: usize = id
                .parse()
                .map_err(|_| TibetanError::BadVocabFile(format!("line {}: bad id", lineno + 1)))?;
            if id != units.len() {
                return Err(TibetanError::BadVocabFile(format!(
                    "line {}: ids must be dense and in order (expected {}, got {id})",
                    lineno + 1,
                    units.len()
                )));
            }
            let g: Granularity = g.parse()?;
            match granularity {
                None => granularity = Some(g),
                Some(prev) if prev != g => {
                    return Err(TibetanError::BadVocabFile(
                        "mixed granularities in one vocabulary".into(),
                    ))
                }
                _ => {}
            }
            units.push(unit.to_string());
        }
        let granularity =
            granularity.ok_or_else(|| TibetanError::BadVocabFile("empty vocabulary file".into()))?;
        if units.len() < RESERVED.len() || RESERVED.iter().zip(&units).any(|(r, u)| r != u) {
            return Err(TibetanError::BadVocabFile(
                "first four entries must be the reserved blank/unk/sos/eos symbols".into(),
            ));
        }
        let distinct: std::collections::HashSet<&String> = units.iter().collect();
        if distinct.len() != units.len() {
            return Err(TibetanError::BadVocabFile("duplicate unit".into()));
        }
        Ok(Self::from_units(granularity, units))
    }
}

/// Lexicon dump for a corpus: one line per distinct Tibetan syllable,
/// `syllable<TAB>unit|unit|...<TAB>component|component|...`.
pub fn lexicon_dump(corpus: &str) -> Result<String, TibetanError> {
    let mut seen = std::collections::HashSet::new();
    let mut lines = Vec::new();
    for syllable in segment_syllables(corpus) {
        if !seen.insert(syllable.clone()) || !is_tibetan_syllable(&syllable) {
            continue;
        }
        let parse = decompose_units(&syllable)?;
        let units: Vec<String> = parse.units.iter().map(|u| u.text()).collect();
        let comps: Vec<String> = parse.components().iter().map(|c| c.ch.to_string()).collect();
        lines.push(format!("{syllable}\t{}\t{}", units.join("|"), comps.join("|")));
    }
    Ok(lines.join("\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn segment_empty_and_single() {
        assert_eq!(segment_syllables(""), Vec::<String>::new());
        assert_eq!(segment_syllables("ཀ"), vec!["ཀ"]);
    }

    #[test]
    fn segment_splits_on_tsheg() {
        // Oracle: the input is exactly [བ ཀ ྲ U+0F0B ཤ ི ས U+0F0B].
        let text = "བཀྲ་ཤིས་";
        let cps: Vec<u32> = text.chars().map(|c| c as u32).collect();
        assert_eq!(cps, vec![0x0F56, 0x0F40, 0x0FB2, 0x0F0B, 0x0F64, 0x0F72, 0x0F66, 0x0F0B]);
        assert_eq!(segment_syllables(text), vec!["བཀྲ", "ཤིས"]);
    }

    #[test]
    fn segment_keeps_opaque_runs_whole() {
        assert_eq!(segment_syllables("ཀ hello ཁ།ག"), vec!["ཀ", "hello", "ཁ", "ག"]);
        assert!(!is_tibetan_syllable("hello"));
        assert!(is_tibetan_syllable("ཀ"));
    }

    #[test]
    fn components_single_letter() {
        let comps = decompose_components("ཀ").unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].ch, 'ཀ');
        assert_eq!(comps[0].class, ComponentClass::BaseLetter);
    }

    #[test]
    fn components_of_bsgrubs() {
        // Oracle: raw codepoint enumeration of the string.
        use ComponentClass::*;
        let comps = decompose_components("བསྒྲུབས").unwrap();
        let expected = [
            ('བ', BaseLetter),
            ('ས', BaseLetter),
            ('ྒ', SubjoinedLetter),
            ('ྲ', SubjoinedLetter),
            ('ུ', VowelSign),
            ('བ', BaseLetter),
            ('ས', BaseLetter),
        ];
        assert_eq!(comps.len(), expected.len());
        for (c, (ch, class)) in comps.iter().zip(expected) {
            assert_eq!((c.ch, c.class), (ch, class));
        }
        let recomposed: String = comps.iter().map(|c| c.ch).collect();
        assert_eq!(recomposed, "བསྒྲུབས");
    }

    #[test]
    fn components_reject_non_tibetan() {
        match decompose_components("ཀx") {
            Err(TibetanError::UnknownCodepoint { codepoint, offset }) => {
                assert_eq!(codepoint, 'x' as u32);
                assert_eq!(offset, 1);
            }
            other => panic!("expected UnknownCodepoint, got {other:?}"),
        }
    }

    #[test]
    fn units_single_letter_is_root() {
        let parse = decompose_units("ཀ").unwrap();
        assert_eq!(parse.units.len(), 1);
        assert_eq!(parse.units[0].kind, UnitKind::RootStack);
    }

    #[test]
    fn units_of_bsgrubs() {
        // Hand-applied grouping: བ precedes the marked stack སྒྲུ, so it is
        // the prefix; the two trailing bare letters are suffix then secondary.
        let parse = decompose_units("བསྒྲུབས").unwrap();
        let kinds: Vec<UnitKind> = parse.units.iter().map(|u| u.kind).collect();
        assert_eq!(
            kinds,
            vec![UnitKind::Prefix, UnitKind::RootStack, UnitKind::Suffix, UnitKind::SecondarySuffix]
        );
        let texts: Vec<String> = parse.units.iter().map(|u| u.text()).collect();
        assert_eq!(texts, vec!["བ", "སྒྲུ", "བ", "ས"]);
        assert_eq!(parse.recompose(), "བསྒྲུབས");
        assert_eq!(parse.components(), decompose_components("བསྒྲུབས").unwrap());
    }

    #[test]
    fn units_bare_letter_rules() {
        // root + suffix
        let parse = decompose_units("ནམ").unwrap();
        assert_eq!(
            parse.units.iter().map(|u| u.kind).collect::<Vec<_>>(),
            vec![UnitKind::RootStack, UnitKind::Suffix]
        );
        // prefix + root + suffix (བ may prefix, ས may close)
        let parse = decompose_units("བགས").unwrap();
        assert_eq!(
            parse.units.iter().map(|u| u.kind).collect::<Vec<_>>(),
            vec![UnitKind::Prefix, UnitKind::RootStack, UnitKind::Suffix]
        );
        // root + suffix + secondary suffix (ན cannot prefix)
        let parse = decompose_units("ནགས").unwrap();
        assert_eq!(
            parse.units.iter().map(|u| u.kind).collect::<Vec<_>>(),
            vec![UnitKind::RootStack, UnitKind::Suffix, UnitKind::SecondarySuffix]
        );
    }

    #[test]
    fn units_reject_pathological_shapes() {
        // ཁ is not a canonical suffix.
        assert!(matches!(decompose_units("ཀཁ"), Err(TibetanError::AmbiguousStructure { .. })));
        // Two vowel-marked stacks cannot both be the root.
        assert!(matches!(decompose_units("ཀིཁུ"), Err(TibetanError::AmbiguousStructure { .. })));
        // A vowel sign with no base letter has nothing to attach to.
        assert!(matches!(
            decompose_units("\u{0F72}"),
            Err(TibetanError::DanglingComponent { .. })
        ));
    }

    #[test]
    fn vocab_frequency_then_codepoint_order() {
        // Count oracle: ཀ appears twice, ཁ once.
        let v = Vocabulary::build("ཀ་ཀ་ཁ", Granularity::Syllable).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.unit_of(0).unwrap(), "<blank>");
        assert_eq!(v.unit_of(1).unwrap(), "<unk>");
        assert_eq!(v.unit_of(2).unwrap(), "<s>");
        assert_eq!(v.unit_of(3).unwrap(), "</s>");
        assert_eq!(v.unit_of(4).unwrap(), "ཀ");
        assert_eq!(v.unit_of(5).unwrap(), "ཁ");
    }

    #[test]
    fn vocab_component_degenerate_matches_syllable() {
        // Single-letter syllables: both granularities see the same unit set.
        let s = Vocabulary::build("ཀ་ཀ་ཁ", Granularity::Syllable).unwrap();
        let c = Vocabulary::build("ཀ་ཀ་ཁ", Granularity::Component).unwrap();
        assert_eq!(s.size(), c.size());
        assert_eq!(s.unit_of(4).unwrap(), c.unit_of(4).unwrap());
    }

    #[test]
    fn vocab_empty_corpus_is_error() {
        assert!(matches!(
            Vocabulary::build("  ", Granularity::Syllable),
            Err(TibetanError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build("བཀྲ་ཤིས་བདེ་ལེགས", Granularity::Syllable).unwrap();
        assert_eq!(v.encode_text(""), Vec::<u32>::new());
        let ids = v.encode_text("བཀྲ་ཤིས");
        assert_eq!(v.decode_ids(&ids).unwrap(), "བཀྲ་ཤིས");
    }

    #[test]
    fn encode_oov_maps_to_unk() {
        let v = Vocabulary::build("ཀ་ཁ", Granularity::Syllable).unwrap();
        assert_eq!(v.encode_text("ཅ"), vec![UNK_ID]);
        assert_eq!(v.decode_ids(&[UNK_ID]).unwrap(), UNK_TEXT);
    }

    #[test]
    fn decode_out_of_range_is_error() {
        let v = Vocabulary::build("ཀ", Granularity::Syllable).unwrap();
        assert!(matches!(v.decode_ids(&[99]), Err(TibetanError::IdOutOfRange { .. })));
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let dir = std::env::temp_dir().join(format!("vocab_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("units.tsv");
        let v = Vocabulary::build("བཀྲ་ཤིས་བདེ་ལེགས", Granularity::SyllableUnit).unwrap();
        v.save_tsv(&path).unwrap();
        let loaded = Vocabulary::load_tsv(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.granularity(), Granularity::SyllableUnit);
        for id in 0..v.size() as u32 {
            assert_eq!(loaded.unit_of(id).unwrap(), v.unit_of(id).unwrap());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn lexicon_dump_format() {
        let dump = lexicon_dump("བཀྲ་ཤིས").unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "བཀྲ\tབ|ཀྲ\tབ|ཀ|ྲ");
        assert_eq!(lines[1], "ཤིས\tཤི|ས\tཤ|ི|ས");
    }

    // Random well-formed syllables: components round-trip and the unit
    // parse refines the component parse.
    fn arb_syllable() -> impl Strategy<Value = String> {
        let base = prop::sample::select(vec![
            'ཀ', 'ཁ', 'ག', 'ཅ', 'ཏ', 'ན', 'པ', 'མ', 'ཚ', 'ཞ', 'ར', 'ཤ', 'ས', 'ཧ',
        ]);
        let sub = prop::option::of(prop::sample::select(vec!['ྱ', 'ྲ', 'ླ']));
        let vowel = prop::option::of(prop::sample::select(vec!['ི', 'ུ', 'ེ', 'ོ']));
        let suffix = prop::option::of(prop::sample::select(SUFFIXES.to_vec()));
        (base, sub, vowel, suffix).prop_map(|(b, s, v, suf)| {
            let mut syl = String::new();
            syl.push(b);
            if let Some(s) = s {
                syl.push(s);
            }
            if let Some(v) = v {
                syl.push(v);
            }
            if let Some(suf) = suf {
                syl.push(suf);
            }
            syl
        })
    }

    proptest! {
        #[test]
        fn prop_component_round_trip(syl in arb_syllable()) {
            let comps = decompose_components(&syl).unwrap();
            let recomposed: String = comps.iter().map(|c| c.ch).collect();
            prop_assert_eq!(recomposed, syl);
        }

        #[test]
        fn prop_units_refine_components(syl in arb_syllable()) {
            let parse = decompose_units(&syl).unwrap();
            prop_assert_eq!(parse.recompose(), syl.clone());
            prop_assert_eq!(parse.components(), decompose_components(&syl).unwrap());
        }
    }
}

//! Object classes and predicate vocabularies.
//!
//! File format: plain text, one name per line, grouped under section headers
//! `[objects]`, `[attention]`, `[spatial]`, `[contact]`. Blank lines and lines
//! starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateType {
    Attention,
    Spatial,
    Contact,
}

impl PredicateType {
    pub const ALL: [PredicateType; 3] = [
        PredicateType::Attention,
        PredicateType::Spatial,
        PredicateType::Contact,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PredicateType::Attention => "attention",
            PredicateType::Spatial => "spatial",
            PredicateType::Contact => "contact",
        }
    }
}

/// A predicate identified by its type and its index within that type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PredicateRef {
    pub kind: PredicateType,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub objects: Vec<String>,
    pub predicates: [Vec<String>; 3],
}

impl Vocabulary {
    pub fn new(
        objects: Vec<String>,
        attention: Vec<String>,
        spatial: Vec<String>,
        contact: Vec<String>,
    ) -> Result<Self> {
        let v = Vocabulary {
            objects,
            predicates: [attention, spatial, contact],
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Vocabulary("no object classes".into()));
        }
        if self.person_class().is_none() {
            return Err(Error::Vocabulary("object classes must include `person`".into()));
        }
        for t in PredicateType::ALL {
            if self.predicates[t.index()].is_empty() {
                return Err(Error::Vocabulary(format!("empty {} vocabulary", t.name())));
            }
        }
        Ok(())
    }

    /// Action Genome's 36 object classes and 3/6/17 predicates.
    pub fn action_genome() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Vocabulary {
            objects: s(&[
                "person", "bag", "bed", "blanket", "book", "box", "broom", "chair",
                "closet/cabinet", "clothes", "cup/glass/bottle", "dish", "door", "doorknob",
                "doorway", "floor", "food", "groceries", "laptop", "light", "medicine", "mirror",
                "paper/notebook", "phone/camera", "picture", "pillow", "refrigerator", "sandwich",
                "shelf", "shoe", "sofa/couch", "table", "television", "towel", "vacuum",
                "window",
            ]),
            predicates: [
                s(&["looking_at", "not_looking_at", "unsure"]),
                s(&["above", "beneath", "in_front_of", "behind", "on_the_side_of", "in"]),
                s(&[
                    "carrying", "covered_by", "drinking_from", "eating", "have_it_on_the_back",
                    "holding", "leaning_on", "lying_on", "not_contacting", "other_relationship",
                    "sitting_on", "standing_on", "touching", "twisting", "wearing", "wiping",
                    "writing_on",
                ]),
            ],
        }
    }

    /// Small vocabulary used by the synthetic generator.
    pub fn desk(num_objects: usize, sizes: [usize; 3]) -> Self {
        let mut objects = vec!["person".to_string()];
        objects.extend((1..num_objects).map(|i| format!("object_{i}")));
        let names = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}_{i}")).collect();
        Vocabulary {
            objects,
            predicates: [
                names("attention", sizes[0]),
                names("spatial", sizes[1]),
                names("contact", sizes[2]),
            ],
        }
    }

    pub fn person_class(&self) -> Option<usize> {
        self.objects.iter().position(|o| o == "person")
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn sizes(&self) -> [usize; 3] {
        [
            self.predicates[0].len(),
            self.predicates[1].len(),
            self.predicates[2].len(),
        ]
    }

    pub fn num_predicates(&self) -> usize {
        self.sizes().iter().sum()
    }

    pub fn predicate_name(&self, p: PredicateRef) -> &str {
        &self.predicates[p.kind.index()][p.id]
    }

    /// Position of `p` in the concatenated attention/spatial/contact list.
    pub fn global_index(&self, p: PredicateRef) -> usize {
        self.sizes()[..p.kind.index()].iter().sum::<usize>() + p.id
    }

    pub fn all_predicates(&self) -> impl Iterator<Item = PredicateRef> + '_ {
        PredicateType::ALL.into_iter().flat_map(move |kind| {
            (0..self.predicates[kind.index()].len()).map(move |id| PredicateRef { kind, id })
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("[objects]\n");
        for o in &self.objects {
            let _ = writeln!(out, "{o}");
        }
        for t in PredicateType::ALL {
            let _ = writeln!(out, "[{}]", t.name());
            for p in &self.predicates[t.index()] {
                let _ = writeln!(out, "{p}");
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut sections: [Vec<String>; 4] = Default::default();
        let mut current: Option<usize> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(match name {
                    "objects" => 0,
                    "attention" => 1,
                    "spatial" => 2,
                    "contact" => 3,
                    other => {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            msg: format!("unknown section `{other}`"),
                        })
                    }
                });
                continue;
            }
            let Some(s) = current else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "name outside of a section".into(),
                });
            };
            sections[s].push(line.to_string());
        }
        let [objects, attention, spatial, contact] = sections;
        Vocabulary::new(objects, attention, spatial, contact)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Vocabulary::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Short fingerprint used to refuse mismatched checkpoints.
    pub fn fingerprint(&self) -> String {
        format!(
            "{:016x}",
            crate::numerics::params::fnv1a(self.to_text().as_bytes())
        )
    }
}

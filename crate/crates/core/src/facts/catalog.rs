// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in relation catalog: typed relations with ten surface templates each.

use super::EntityType::{self, City, Country, Organization, Person};

pub(crate) struct RelationDef {
    pub name: &'static str,
    pub head: EntityType,
    pub tail: EntityType,
    pub templates: [&'static str; 10],
}

pub(crate) const CATALOG: [RelationDef; 10] = [
    RelationDef {
        name: "capital",
        head: Country,
        tail: City,
        templates: [
            "The capital of [X] is [Y] .",
            "[X] has its capital in [Y] .",
            "[Y] is the capital of [X] .",
            "the capital city of [X] is [Y] .",
            "[X] 's capital is [Y] .",
            "[X] is governed from [Y] .",
            "the seat of government of [X] is [Y] .",
            "[Y] serves as the capital of [X] .",
            "[X] capital : [Y] .",
            "the national capital of [X] is called [Y] .",
        ],
    },
    RelationDef {
        name: "place_of_birth",
        head: Person,
        tail: City,
        templates: [
            "[X] was born in [Y] .",
            "[X] is originally from [Y] .",
            "the birthplace of [X] is [Y] .",
            "[Y] is where [X] was born .",
            "[X] was born in the city of [Y] .",
            "[X] came into the world in [Y] .",
            "[X] , a native of [Y] .",
            "the hometown of [X] is [Y] .",
            "[X] birth place : [Y] .",
            "[X] spent early childhood in [Y] .",
        ],
    },
    RelationDef {
        name: "citizenship",
        head: Person,
        tail: Country,
        templates: [
            "[X] is a citizen of [Y] .",
            "[X] holds citizenship of [Y] .",
            "[X] has a passport from [Y] .",
            "the nationality of [X] is [Y] .",
            "[X] is a national of [Y] .",
            "[Y] is the country of citizenship of [X] .",
            "[X] carries the citizenship of [Y] .",
            "[X] citizenship : [Y] .",
            "[X] is legally a subject of [Y] .",
            "by nationality [X] belongs to [Y] .",
        ],
    },
    RelationDef {
        name: "employer",
        head: Person,
        tail: Organization,
        templates: [
            "[X] works for [Y] .",
            "[X] is employed by [Y] .",
            "[X] is an employee of [Y] .",
            "the employer of [X] is [Y] .",
            "[Y] employs [X] .",
            "[X] took a job at [Y] .",
            "[X] is on the staff of [Y] .",
            "[X] draws a salary from [Y] .",
            "[X] employer : [Y] .",
            "[Y] pays the wages of [X] .",
        ],
    },
    RelationDef {
        name: "headquarters",
        head: Organization,
        tail: City,
        templates: [
            "[X] is headquartered in [Y] .",
            "the headquarters of [X] are in [Y] .",
            "[X] has its main office in [Y] .",
            "[Y] hosts the head office of [X] .",
            "[X] is based in [Y] .",
            "the main office of [X] is located in [Y] .",
            "[X] runs its operations from [Y] .",
            "[X] headquarters : [Y] .",
            "the central office of [X] sits in [Y] .",
            "[X] keeps its head office in the city of [Y] .",
        ],
    },
    RelationDef {
        name: "located_in",
        head: City,
        tail: Country,
        templates: [
            "[X] is a city in [Y] .",
            "[X] is located in [Y] .",
            "[X] lies within [Y] .",
            "[Y] contains the city of [X] .",
            "the city of [X] is part of [Y] .",
            "[X] belongs to the country [Y] .",
            "[X] can be found in [Y] .",
            "[X] country : [Y] .",
            "[X] is situated in [Y] .",
            "the town of [X] is in [Y] .",
        ],
    },
    RelationDef {
        name: "founded_by",
        head: Organization,
        tail: Person,
        templates: [
            "[X] was founded by [Y] .",
            "the founder of [X] is [Y] .",
            "[Y] founded [X] .",
            "[Y] is the founder of [X] .",
            "[X] was established by [Y] .",
            "[Y] started the company [X] .",
            "[X] was created by [Y] .",
            "[X] founder : [Y] .",
            "[X] owes its founding to [Y] .",
            "[Y] set up [X] .",
        ],
    },
    RelationDef {
        name: "work_location",
        head: Person,
        tail: City,
        templates: [
            "[X] works in [Y] .",
            "[X] used to work in [Y] .",
            "the workplace of [X] is in [Y] .",
            "[X] commutes to [Y] for work .",
            "[X] has an office in [Y] .",
            "[X] is working in the city of [Y] .",
            "[Y] is where [X] works .",
            "[X] work location : [Y] .",
            "[X] does business in [Y] .",
            "[X] found work in [Y] .",
        ],
    },
    RelationDef {
        name: "shares_border_with",
        head: Country,
        tail: Country,
        templates: [
            "[X] shares a border with [Y] .",
            "[X] borders [Y] .",
            "[Y] is a neighbour of [X] .",
            "the neighbouring country of [X] is [Y] .",
            "[X] is adjacent to [Y] .",
            "[X] and [Y] share a frontier .",
            "[X] lies next to [Y] .",
            "[X] neighbour : [Y] .",
            "across the border from [X] lies [Y] .",
            "[X] has a common border with [Y] .",
        ],
    },
    RelationDef {
        name: "parent_organization",
        head: Organization,
        tail: Organization,
        templates: [
            "[X] is owned by [Y] .",
            "[X] is a subsidiary of [Y] .",
            "the parent company of [X] is [Y] .",
            "[Y] owns [X] .",
            "[Y] is the parent of [X] .",
            "[X] belongs to [Y] .",
            "[X] was acquired by [Y] .",
            "[X] parent : [Y] .",
            "[X] operates as a division of [Y] .",
            "[Y] controls [X] .",
        ],
    },
];

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "re", "su", "ta", "ve", "no", "ri", "da", "be", "zo", "fa", "gu", "hi", "pe",
];

/// Name for the `n`-th candidate of a type: three syllables plus a
/// type-specific ending, capitalized. Distinct `n < 4096` give distinct names
/// within a type, and the endings keep types apart.
pub(crate) fn entity_name(kind: EntityType, n: usize) -> String {
    let stem: String = [n / 256, (n / 16) % 16, n % 16]
        .iter()
        .map(|&i| SYLLABLES[i])
        .collect();
    let ending = match kind {
        Person => "n",
        City => "ton",
        Country => "land",
        Organization => "corp",
    };
    let mut name = stem + ending;
    name[..1].make_ascii_uppercase();
    name
}

pub(crate) const NAME_SPACE: usize = 4096;

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn templates_are_well_formed_and_unique() {
        let mut seen = HashSet::new();
        for r in &CATALOG {
            for t in r.templates {
                assert_eq!(t.matches("[X]").count(), 1, "{t}");
                assert_eq!(t.matches("[Y]").count(), 1, "{t}");
                assert!(seen.insert(t), "duplicate template {t}");
            }
        }
    }

    #[test]
    fn names_do_not_collide_across_types() {
        let mut seen = HashSet::new();
        for kind in [Person, City, Country, Organization] {
            for n in (0..NAME_SPACE).step_by(37) {
                assert!(seen.insert(entity_name(kind, n)));
            }
        }
        assert_eq!(entity_name(City, 0), "Kakakaton");
    }
}

//! Navigation commands and their action sequences.
//!
//! Grammar (the optional `opposite`/`around` productions belong to the full
//! grammar only):
//!
//! ```text
//! C -> S | S and S | S after S
//! S -> V | V twice | V thrice
//! V -> D | U | D[1] opposite D[2] | D[1] around D[2]
//! D -> U left | U right | turn left | turn right
//! U -> walk | look | run | jump
//! ```

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

const ACTIONS: [&str; 4] = ["walk", "look", "run", "jump"];
const DIRECTIONS: [&str; 2] = ["left", "right"];

fn action(word: &str) -> Option<&'static str> {
    Some(match word {
        "walk" => "I_WALK",
        "look" => "I_LOOK",
        "run" => "I_RUN",
        "jump" => "I_JUMP",
        _ => return None,
    })
}

fn turn(direction: &str) -> Option<&'static str> {
    Some(match direction {
        "left" => "I_TURN_LEFT",
        "right" => "I_TURN_RIGHT",
        _ => return None,
    })
}

fn bad(command: &[&str]) -> Error {
    Error::Format(format!("not a navigation command: {:?}", command.join(" ")))
}

/// `V` phrases.
fn verb_phrase(words: &[&str]) -> Result<Vec<&'static str>> {
    let (verb, rest) = words.split_first().ok_or_else(|| bad(words))?;
    let act = if *verb == "turn" { None } else { Some(action(verb).ok_or_else(|| bad(words))?) };
    let with_turn = |t: &'static str| -> Vec<&'static str> { std::iter::once(t).chain(act).collect() };
    match rest {
        [] => act.map(|a| vec![a]).ok_or_else(|| bad(words)),
        [dir] => Ok(with_turn(turn(dir).ok_or_else(|| bad(words))?)),
        ["opposite", dir] => {
            let t = turn(dir).ok_or_else(|| bad(words))?;
            Ok(std::iter::once(t).chain(with_turn(t)).collect())
        }
        ["around", dir] => Ok(with_turn(turn(dir).ok_or_else(|| bad(words))?).repeat(4)),
        _ => Err(bad(words)),
    }
}

/// `S` phrases.
fn repeated_phrase(words: &[&str]) -> Result<Vec<&'static str>> {
    match words.split_last() {
        Some((&"twice", head)) => Ok(verb_phrase(head)?.repeat(2)),
        Some((&"thrice", head)) => Ok(verb_phrase(head)?.repeat(3)),
        _ => verb_phrase(words),
    }
}

/// Action sequence of a command.
pub fn interpret(command: &[&str]) -> Result<Vec<&'static str>> {
    if let Some(i) = command.iter().position(|w| *w == "and") {
        let mut out = repeated_phrase(&command[..i])?;
        out.extend(repeated_phrase(&command[i + 1..])?);
        return Ok(out);
    }
    if let Some(i) = command.iter().position(|w| *w == "after") {
        let mut out = repeated_phrase(&command[i + 1..])?;
        out.extend(repeated_phrase(&command[..i])?);
        return Ok(out);
    }
    repeated_phrase(command)
}

/// Every command of the grammar, in a fixed order.
pub fn all_commands(full_grammar: bool) -> Vec<Vec<&'static str>> {
    let mut verbs: Vec<Vec<&'static str>> = Vec::new();
    for a in ACTIONS {
        verbs.push(vec![a]);
    }
    for a in ACTIONS.iter().copied().chain(["turn"]) {
        for d in DIRECTIONS {
            verbs.push(vec![a, d]);
            if full_grammar {
                verbs.push(vec![a, "opposite", d]);
                verbs.push(vec![a, "around", d]);
            }
        }
    }
    let mut phrases = Vec::new();
    for v in &verbs {
        phrases.push(v.clone());
        for r in ["twice", "thrice"] {
            let mut p = v.clone();
            p.push(r);
            phrases.push(p);
        }
    }
    let mut commands = phrases.clone();
    for conj in ["and", "after"] {
        for a in &phrases {
            for b in &phrases {
                let mut c = a.clone();
                c.push(conj);
                c.extend(b);
                commands.push(c);
            }
        }
    }
    commands
}

/// Up to `size` (command, actions) pairs with pairwise distinct action
/// sequences, in random order. Each action sequence is represented by its
/// shortest command (the first in grammar order among equally short ones),
/// so the mapping is invertible.
pub fn generate(size: usize, full_grammar: bool, rng: &mut impl Rng) -> Vec<(Vec<String>, Vec<String>)> {
    let mut by_actions: BTreeMap<Vec<&'static str>, Vec<&'static str>> = BTreeMap::new();
    for c in all_commands(full_grammar) {
        let actions = interpret(&c).expect("grammar commands are valid");
        let entry = by_actions.entry(actions).or_insert_with(|| c.clone());
        if c.len() < entry.len() {
            *entry = c;
        }
    }
    let mut pairs: Vec<_> = by_actions
        .into_iter()
        .map(|(actions, command)| {
            (command.iter().map(|s| s.to_string()).collect(), actions.iter().map(|s| s.to_string()).collect())
        })
        .collect();
    pairs.shuffle(rng);
    pairs.truncate(size);
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn run(c: &str) -> String {
        interpret(&c.split_whitespace().collect::<Vec<_>>()).unwrap().join(" ")
    }

    #[test]
    fn interpreter_examples() {
        assert_eq!(
            run("look right thrice after run left"),
            "I_TURN_LEFT I_RUN I_TURN_RIGHT I_LOOK I_TURN_RIGHT I_LOOK I_TURN_RIGHT I_LOOK"
        );
        assert_eq!(run("walk"), "I_WALK");
        assert_eq!(run("jump left twice"), "I_TURN_LEFT I_JUMP I_TURN_LEFT I_JUMP");
        assert_eq!(run("turn right and walk"), "I_TURN_RIGHT I_WALK");
        assert_eq!(run("turn opposite left"), "I_TURN_LEFT I_TURN_LEFT");
        assert_eq!(run("run opposite right"), "I_TURN_RIGHT I_TURN_RIGHT I_RUN");
        assert_eq!(run("look around left"), "I_TURN_LEFT I_LOOK I_TURN_LEFT I_LOOK I_TURN_LEFT I_LOOK I_TURN_LEFT I_LOOK");
        assert!(interpret(&["turn"]).is_err());
        assert!(interpret(&["walk", "up"]).is_err());
        assert!(interpret(&[]).is_err());
    }

    #[test]
    fn grammar_sizes() {
        assert_eq!(all_commands(false).len(), 3570);
        assert_eq!(all_commands(true).len(), 20910);
    }

    #[test]
    fn generated_pairs_are_bijective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = generate(5000, false, &mut rng);
        assert_eq!(pairs.len(), 1682);
        let xs: HashSet<_> = pairs.iter().map(|p| &p.0).collect();
        let zs: HashSet<_> = pairs.iter().map(|p| &p.1).collect();
        assert_eq!(xs.len(), pairs.len());
        assert_eq!(zs.len(), pairs.len());
        for (x, z) in &pairs {
            let words: Vec<&str> = x.iter().map(String::as_str).collect();
            assert_eq!(&interpret(&words).unwrap().join(" "), &z.join(" "));
        }
        assert_eq!(pairs.iter().map(|p| p.0.len()).max(), Some(7));
        assert_eq!(pairs.iter().map(|p| p.1.len()).max(), Some(12));
        assert_eq!(generate(10, false, &mut rng).len(), 10);
        let commands: HashSet<String> = pairs.iter().map(|p| p.0.join(" ")).collect();
        assert!(commands.contains("walk twice"));
        assert!(commands.contains("walk and run"));
        assert!(!commands.contains("run after walk"));
    }
}

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    illegal, Action, EnvInner, EnvKind, EnvSpec, Goal, InstanceSet, Instruction, Observation,
    Split, Verb, NOTHING_HAPPENS,
};
use crate::error::{Error, Result};
use crate::hashing::SeedTree;

const ROOMS: &[&str] = &[
    "kitchen",
    "hallway",
    "lab",
    "garden",
    "workshop",
    "greenhouse",
    "bedroom",
    "basement",
    "attic",
    "office",
    "pantry",
    "studio",
];

/// Objects after `SEEN_OBJECTS` only appear in unseen test tasks.
const OBJECTS: &[&str] = &[
    "apple",
    "beaker",
    "seed",
    "soil",
    "knife",
    "lamp",
    "battery",
    "thermometer",
    "flower",
    "pot",
    "wire",
    "magnet",
    "key",
    "book",
    "cup",
    "lens",
    "jar",
    "shovel",
    "water",
    "stone",
    "feather",
    "candle",
    "bulb",
    "funnel",
    "sponge",
    "fork",
    "kettle",
    "ruler",
];
const SEEN_OBJECTS: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainObject {
    pub name: String,
    pub room: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subgoal {
    pub verb: Verb,
    pub object: usize,
    /// Room the action must happen in; `None` means anywhere.
    pub room: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainTask {
    pub rooms: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub objects: Vec<ChainObject>,
    pub start: usize,
    pub subgoals: Vec<Subgoal>,
}

impl ChainTask {
    fn neighbors(&self, room: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == room {
                    Some(b)
                } else if b == room {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        n.sort_unstable();
        n.dedup();
        n
    }

    fn room_by_name(&self, name: &str) -> Option<usize> {
        self.rooms.iter().position(|r| r == name)
    }

    fn object_by_name(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    fn path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.rooms.len()];
        let mut queue = VecDeque::from([from]);
        prev[from] = from;
        while let Some(r) = queue.pop_front() {
            if r == to {
                let mut path = vec![to];
                let mut cur = to;
                while cur != from {
                    cur = prev[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path[1..].to_vec());
            }
            for n in self.neighbors(r) {
                if prev[n] == usize::MAX {
                    prev[n] = r;
                    queue.push_back(n);
                }
            }
        }
        None
    }

    fn describe_subgoal(&self, g: &Subgoal) -> String {
        let obj = &self.objects[g.object].name;
        match (g.verb, g.room) {
            (Verb::Take, _) => format!("take the {obj}"),
            (Verb::Use, Some(r)) => format!("use the {obj} in the {}", self.rooms[r]),
            (Verb::Use, None) => format!("use the {obj}"),
            _ => format!("focus on the {obj}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabState {
    pub room: usize,
    pub held: Vec<usize>,
    /// Current location of each object; `None` while held.
    pub object_room: Vec<Option<usize>>,
    pub completed: usize,
}

fn random_task(spec: &EnvSpec, vocab: &[&str], rng: &mut impl Rng) -> ChainTask {
    let n_rooms = spec.rooms;
    let mut room_names: Vec<&str> = ROOMS.to_vec();
    room_names.shuffle(rng);
    let rooms: Vec<String> = (0..n_rooms)
        .map(|i| match room_names.get(i) {
            Some(r) => r.to_string(),
            None => format!("room{i}"),
        })
        .collect();
    let edges: Vec<(usize, usize)> = (1..n_rooms).map(|i| (rng.gen_range(0..i), i)).collect();
    let mut names: Vec<&str> = vocab.to_vec();
    names.shuffle(rng);
    let objects: Vec<ChainObject> = (0..spec.objects)
        .map(|i| ChainObject {
            name: names
                .get(i)
                .map_or_else(|| format!("object{i}"), |s| s.to_string()),
            room: rng.gen_range(0..n_rooms),
        })
        .collect();

    let m = spec.subgoals;
    let mut untouched: Vec<usize> = (0..objects.len()).collect();
    untouched.shuffle(rng);
    let mut taken_unused: Vec<usize> = Vec::new();
    let mut subgoals = Vec::with_capacity(m);
    for j in 0..m {
        let last = j + 1 == m;
        let can_use = !taken_unused.is_empty();
        let choice = if last {
            if can_use && rng.gen_bool(0.5) {
                Verb::Use
            } else {
                Verb::Focus
            }
        } else if can_use && rng.gen_bool(0.5) {
            Verb::Use
        } else {
            Verb::Take
        };
        let sub = match choice {
            Verb::Use => {
                let k = rng.gen_range(0..taken_unused.len());
                let object = taken_unused.swap_remove(k);
                Subgoal {
                    verb: Verb::Use,
                    object,
                    room: Some(rng.gen_range(0..n_rooms)),
                }
            }
            verb => {
                let object = untouched.pop().expect("objects >= subgoals");
                if verb == Verb::Take {
                    taken_unused.push(object);
                }
                Subgoal {
                    verb,
                    object,
                    room: Some(objects[object].room),
                }
            }
        };
        subgoals.push(sub);
    }
    ChainTask {
        rooms,
        edges,
        objects,
        start: rng.gen_range(0..n_rooms),
        subgoals,
    }
}

fn task_text(task: &ChainTask) -> String {
    let parts: Vec<String> = task
        .subgoals
        .iter()
        .map(|g| task.describe_subgoal(g))
        .collect();
    format!("your task is to {}", parts.join(" then "))
}

pub(super) fn generate(
    spec: &EnvSpec,
    n_train: usize,
    n_test: usize,
    tree: SeedTree,
) -> Result<InstanceSet> {
    if spec.objects > OBJECTS.len() {
        return Err(Error::Config(format!(
            "chainlab supports at most {} objects",
            OBJECTS.len()
        )));
    }
    let mut rng = tree.rng();
    let total = n_train + n_test;
    let n_unseen = n_test / 2;
    let mut instructions = Vec::with_capacity(total);
    let mut seen_texts = std::collections::BTreeSet::new();
    let mut attempts = 0;
    while instructions.len() < total {
        attempts += 1;
        if attempts > 200 * total + 1000 {
            return Err(Error::Config(
                "could not generate distinct chainlab tasks within max_turns".into(),
            ));
        }
        let i = instructions.len();
        let split = if i < n_train {
            Split::Train
        } else if i < total - n_unseen {
            Split::TestSeen
        } else {
            Split::TestUnseen
        };
        let vocab = if split == Split::TestUnseen {
            OBJECTS
        } else {
            &OBJECTS[..SEEN_OBJECTS.min(OBJECTS.len())]
        };
        if vocab.len() < spec.objects {
            return Err(Error::Config(format!(
                "object vocabulary ({}) smaller than env.objects ({})",
                vocab.len(),
                spec.objects
            )));
        }
        let task = random_task(spec, vocab, &mut rng);
        if split == Split::TestUnseen
            && task
                .objects
                .iter()
                .all(|o| OBJECTS[..SEEN_OBJECTS].contains(&o.name.as_str()))
        {
            continue;
        }
        match expert_plan(&task) {
            Some(plan) if plan.len() <= spec.max_turns() => {}
            _ => continue,
        }
        let text = task_text(&task);
        let key = format!("{text}|{:?}|{:?}", task.edges, task.objects);
        if !seen_texts.insert(key) {
            continue;
        }
        instructions.push(Instruction {
            id: format!("lab-{i:05}"),
            text,
            goal: Goal::Chainlab(task),
            split,
        });
    }
    Ok(InstanceSet::new(spec.clone(), Vec::new(), instructions))
}

fn describe_room(task: &ChainTask, lab: &LabState) -> String {
    let here: Vec<&str> = lab
        .object_room
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == Some(lab.room))
        .map(|(i, _)| task.objects[i].name.as_str())
        .collect();
    let exits: Vec<&str> = task
        .neighbors(lab.room)
        .into_iter()
        .map(|r| task.rooms[r].as_str())
        .collect();
    format!(
        "you are in the {}. you see: {}. exits: {}.",
        task.rooms[lab.room],
        if here.is_empty() {
            "nothing".to_string()
        } else {
            here.join(", ")
        },
        if exits.is_empty() {
            "none".to_string()
        } else {
            exits.join(", ")
        }
    )
}

pub(super) fn reset(ins: &Instruction, task: &ChainTask) -> (EnvInner, Observation) {
    let lab = LabState {
        room: task.start,
        held: Vec::new(),
        object_room: task.objects.iter().map(|o| Some(o.room)).collect(),
        completed: 0,
    };
    let obs = format!("instruction: {} | {}", ins.text, describe_room(task, &lab));
    (EnvInner::Chainlab(lab), Observation::new(obs))
}

fn matches_next(task: &ChainTask, lab: &LabState, verb: Verb, object: usize) -> bool {
    task.subgoals.get(lab.completed).is_some_and(|g| {
        g.verb == verb && g.object == object && g.room.is_none_or(|r| r == lab.room)
    })
}

/// Take-subgoals whose object is already held complete as soon as they
/// become next in order.
fn advance_held_takes(task: &ChainTask, lab: &mut LabState) {
    while let Some(g) = task.subgoals.get(lab.completed) {
        if g.verb == Verb::Take && lab.held.contains(&g.object) {
            lab.completed += 1;
        } else {
            break;
        }
    }
}

pub(super) fn step(
    task: &ChainTask,
    lab: &mut LabState,
    action: &Action,
) -> Result<(Observation, Option<f64>)> {
    let before = lab.completed;
    let obs = match action.verb {
        Verb::Goto => match task.room_by_name(&action.arg) {
            Some(r) if task.neighbors(lab.room).contains(&r) => {
                lab.room = r;
                describe_room(task, lab)
            }
            _ => NOTHING_HAPPENS.to_string(),
        },
        Verb::Take => match task.object_by_name(&action.arg) {
            Some(o) if lab.object_room[o] == Some(lab.room) => {
                lab.object_room[o] = None;
                lab.held.push(o);
                advance_held_takes(task, lab);
                format!("you take the {}.", action.arg)
            }
            _ => NOTHING_HAPPENS.to_string(),
        },
        Verb::Use => match task.object_by_name(&action.arg) {
            Some(o) if lab.held.contains(&o) && matches_next(task, lab, Verb::Use, o) => {
                lab.completed += 1;
                advance_held_takes(task, lab);
                format!("you use the {}.", action.arg)
            }
            _ => NOTHING_HAPPENS.to_string(),
        },
        Verb::Focus => match task.object_by_name(&action.arg) {
            Some(o) if lab.held.contains(&o) || lab.object_room[o] == Some(lab.room) => {
                if matches_next(task, lab, Verb::Focus, o)
                    || (lab.held.contains(&o) && is_next_focus(task, lab, o))
                {
                    lab.completed += 1;
                    advance_held_takes(task, lab);
                }
                format!("you focus on the {}.", action.arg)
            }
            _ => NOTHING_HAPPENS.to_string(),
        },
        _ => return Err(illegal(action, EnvKind::Chainlab)),
    };
    let done = lab.completed == task.subgoals.len();
    let obs = if lab.completed > before && !done {
        format!("{obs} subgoal complete.")
    } else {
        obs
    };
    Ok((Observation::new(obs), done.then_some(1.0)))
}

fn is_next_focus(task: &ChainTask, lab: &LabState, object: usize) -> bool {
    task.subgoals
        .get(lab.completed)
        .is_some_and(|g| g.verb == Verb::Focus && g.object == object)
}

pub(super) fn available(task: &ChainTask, lab: &LabState) -> Vec<Action> {
    let mut actions: Vec<Action> = task
        .neighbors(lab.room)
        .into_iter()
        .map(|r| Action::new(Verb::Goto, task.rooms[r].clone()))
        .collect();
    for (o, room) in lab.object_room.iter().enumerate() {
        if *room == Some(lab.room) {
            actions.push(Action::new(Verb::Take, task.objects[o].name.clone()));
            actions.push(Action::new(Verb::Focus, task.objects[o].name.clone()));
        }
    }
    for &o in &lab.held {
        actions.push(Action::new(Verb::Use, task.objects[o].name.clone()));
        actions.push(Action::new(Verb::Focus, task.objects[o].name.clone()));
    }
    if actions.is_empty() {
        // Isolated single room with nothing in it.
        actions.push(Action::new(Verb::Goto, task.rooms[lab.room].clone()));
    }
    actions
}

/// Shortest-path navigation to each subgoal's room, then the subgoal action.
pub(super) fn expert_plan(task: &ChainTask) -> Option<Vec<Action>> {
    let mut room = task.start;
    let mut object_room: Vec<Option<usize>> = task.objects.iter().map(|o| Some(o.room)).collect();
    let mut plan = Vec::new();
    for g in &task.subgoals {
        let held = object_room[g.object].is_none();
        if g.verb == Verb::Take && held {
            continue;
        }
        let target = match g.verb {
            Verb::Take => object_room[g.object]?,
            Verb::Focus if held => room,
            Verb::Focus => object_room[g.object]?,
            _ => g.room.unwrap_or(room),
        };
        for r in task.path(room, target)? {
            plan.push(Action::new(Verb::Goto, task.rooms[r].clone()));
        }
        room = target;
        if g.verb == Verb::Take {
            object_room[g.object] = None;
        }
        plan.push(Action::new(g.verb, task.objects[g.object].name.clone()));
    }
    Some(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::generate_instances;

    #[test]
    fn reset_lists_starting_room() {
        let set = generate_instances(&EnvSpec::chainlab(), 3, 2, 1).unwrap();
        let ins = &set.instructions[0];
        let Goal::Chainlab(task) = &ins.goal else {
            panic!()
        };
        let (_, obs) = set.reset(&ins.id, 0).unwrap();
        assert!(obs
            .as_str()
            .contains(&format!("you are in the {}", task.rooms[task.start])));
        assert!(obs.as_str().contains("you see:"));
    }

    #[test]
    fn timeout_reward_is_subgoal_fraction() {
        let spec = EnvSpec::chainlab();
        let set = generate_instances(&spec, 30, 2, 4).unwrap();
        // Replay the expert until two subgoals are done, then waste turns.
        for ins in set.train() {
            let Goal::Chainlab(task) = &ins.goal else {
                panic!()
            };
            let expert = set.expert_solve(&ins.id).unwrap();
            let (mut st, _) = set.reset(&ins.id, 0).unwrap();
            let mut done_two = false;
            for s in &expert.steps {
                set.step(&mut st, &s.action).unwrap();
                let EnvInner::Chainlab(lab) = &st.inner else {
                    panic!()
                };
                if lab.completed == 2 {
                    done_two = true;
                    break;
                }
            }
            if !done_two {
                continue;
            }
            let waste = Action::new(Verb::Use, "nonexistent");
            while !st.done {
                set.step(&mut st, &waste).unwrap();
            }
            assert_eq!(st.turn, 20);
            assert_eq!(task.subgoals.len(), 4);
            assert_eq!(st.reward, Some(0.5));
            return;
        }
        panic!("no task reached exactly two subgoals");
    }

    #[test]
    fn unseen_split_uses_held_out_objects() {
        let set = generate_instances(&EnvSpec::chainlab(), 4, 6, 2).unwrap();
        let unseen: Vec<_> = set.split(Split::TestUnseen).collect();
        assert_eq!(unseen.len(), 3);
        for ins in unseen {
            let Goal::Chainlab(task) = &ins.goal else {
                panic!()
            };
            assert!(task
                .objects
                .iter()
                .any(|o| !OBJECTS[..SEEN_OBJECTS].contains(&o.name.as_str())));
        }
    }

    #[test]
    fn wrong_room_use_does_nothing() {
        let set = generate_instances(&EnvSpec::chainlab(), 40, 2, 8).unwrap();
        let found = set.train().into_iter().find_map(|ins| {
            let Goal::Chainlab(task) = &ins.goal else {
                return None;
            };
            (task.subgoals[0].verb == Verb::Take && task.subgoals[1].verb == Verb::Use)
                .then_some((ins, task))
        });
        let (ins, task) = found.expect("a take-then-use task");
        let expert = set.expert_solve(&ins.id).unwrap();
        let (mut st, _) = set.reset(&ins.id, 0).unwrap();
        // Perform steps up to and including the take.
        for s in &expert.steps {
            set.step(&mut st, &s.action).unwrap();
            if s.action.verb == Verb::Take {
                break;
            }
        }
        let EnvInner::Chainlab(lab) = &st.inner else {
            panic!()
        };
        let use_room = task.subgoals[1].room.unwrap();
        if lab.room != use_room {
            let name = task.objects[task.subgoals[1].object].name.clone();
            let out = set.step(&mut st, &Action::new(Verb::Use, name)).unwrap();
            assert_eq!(out.observation.as_str(), NOTHING_HAPPENS);
        }
    }
}

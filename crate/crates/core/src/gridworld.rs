//! The 6x6 grid world: objects, the agent, the 17-channel cell encoding and a
//! replay simulator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Side length of the (square) grid.
pub const GRID_SIZE: usize = 6;
/// Number of cells, i.e. visual tokens fed to the model.
pub const NUM_CELLS: usize = GRID_SIZE * GRID_SIZE;
/// Width of the per-cell feature vector.
pub const CELL_FEATURES: usize = 17;

const SIZE_OFFSET: usize = 0;
const COLOR_OFFSET: usize = 4;
const SHAPE_OFFSET: usize = 8;
const AGENT_INDEX: usize = 12;
const ORIENTATION_OFFSET: usize = 13;

/// Dense encoding of a full world, indexed `[row][col][channel]`.
pub type WorldTensor = [[[f64; CELL_FEATURES]; GRID_SIZE]; GRID_SIZE];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WorldError {
    #[error("object size {0} outside 1..=4")]
    InvalidSize(u8),
    #[error("cell ({row}, {col}) is outside the {GRID_SIZE}x{GRID_SIZE} grid")]
    OutOfBounds { row: usize, col: usize },
    #[error("cell ({row}, {col}) already holds an object")]
    Occupied { row: usize, col: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == word)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Cylinder,
    Box,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Cylinder, Shape::Box];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Cylinder => "cylinder",
            Shape::Box => "box",
        }
    }
}

/// An object's visual attributes. `size` is always in `1..=4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
    size: u8,
}

impl ObjectSpec {
    pub fn new(color: Color, shape: Shape, size: u8) -> Result<Self, WorldError> {
        if !(1..=4).contains(&size) {
            return Err(WorldError::InvalidSize(size));
        }
        Ok(Self { color, shape, size })
    }

    pub fn size(&self) -> u8 {
        self.size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    North,
    East,
    South,
    West,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::North,
        Orientation::East,
        Orientation::South,
        Orientation::West,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn turn_right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    pub fn turn_left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    /// Row/column displacement of one step in this direction.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Orientation::North => (-1, 0),
            Orientation::East => (0, 1),
            Orientation::South => (1, 0),
            Orientation::West => (0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AgentState {
    pub row: usize,
    pub col: usize,
    pub orientation: Orientation,
}

impl AgentState {
    pub fn new(row: usize, col: usize, orientation: Orientation) -> Result<Self, WorldError> {
        check_bounds(row, col)?;
        Ok(Self { row, col, orientation })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft,
    TurnRight,
    Walk,
    Push,
    Pull,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Walk,
        Action::Push,
        Action::Pull,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::TurnLeft => "turn_left",
            Action::TurnRight => "turn_right",
            Action::Walk => "walk",
            Action::Push => "push",
            Action::Pull => "pull",
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

fn check_bounds(row: usize, col: usize) -> Result<(), WorldError> {
    if row >= GRID_SIZE || col >= GRID_SIZE {
        return Err(WorldError::OutOfBounds { row, col });
    }
    Ok(())
}

/// A grid with at most one object per cell and exactly one agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "WorldRepr", into = "WorldRepr")]
pub struct World {
    cells: [[Option<ObjectSpec>; GRID_SIZE]; GRID_SIZE],
    agent: AgentState,
}

impl World {
    pub fn new(agent: AgentState) -> Self {
        Self { cells: [[None; GRID_SIZE]; GRID_SIZE], agent }
    }

    pub fn agent(&self) -> AgentState {
        self.agent
    }

    pub fn set_agent(&mut self, agent: AgentState) {
        self.agent = agent;
    }

    pub fn place(&mut self, row: usize, col: usize, object: ObjectSpec) -> Result<(), WorldError> {
        check_bounds(row, col)?;
        let cell = &mut self.cells[row][col];
        if cell.is_some() {
            return Err(WorldError::Occupied { row, col });
        }
        *cell = Some(object);
        Ok(())
    }

    pub fn object_at(&self, row: usize, col: usize) -> Option<&ObjectSpec> {
        self.cells.get(row)?.get(col)?.as_ref()
    }

    /// Objects in row-major order.
    pub fn objects(&self) -> impl Iterator<Item = (usize, usize, ObjectSpec)> + '_ {
        self.cells.iter().enumerate().flat_map(|(r, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(c, cell)| cell.map(|obj| (r, c, obj)))
        })
    }

    pub fn num_objects(&self) -> usize {
        self.objects().count()
    }

    pub fn is_empty_cell(&self, row: usize, col: usize) -> bool {
        self.object_at(row, col).is_none()
    }
}

/// Feature vector for a single cell.
///
/// Layout: `[size one-hot 4 | color one-hot 4 | shape one-hot 4 | agent 1 | orientation one-hot 4]`.
pub fn encode_cell(cell: Option<&ObjectSpec>, agent_here: Option<&AgentState>) -> [f64; CELL_FEATURES] {
    let mut v = [0.0; CELL_FEATURES];
    if let Some(obj) = cell {
        v[SIZE_OFFSET + usize::from(obj.size) - 1] = 1.0;
        v[COLOR_OFFSET + obj.color.index()] = 1.0;
        v[SHAPE_OFFSET + obj.shape.index()] = 1.0;
    }
    if let Some(agent) = agent_here {
        v[AGENT_INDEX] = 1.0;
        v[ORIENTATION_OFFSET + agent.orientation.index()] = 1.0;
    }
    v
}

pub fn encode_world(world: &World) -> WorldTensor {
    let mut out = [[[0.0; CELL_FEATURES]; GRID_SIZE]; GRID_SIZE];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let agent = (world.agent.row == r && world.agent.col == c).then_some(&world.agent);
            *cell = encode_cell(world.cells[r][c].as_ref(), agent);
        }
    }
    out
}

/// Row-major flattening of [`encode_world`] into the 36 visual tokens.
pub fn visual_tokens(world: &World) -> Vec<[f64; CELL_FEATURES]> {
    encode_world(world).iter().flat_map(|row| row.iter().copied()).collect()
}

/// Applies one action. Walking off the grid is a no-op; push and pull leave
/// the world unchanged (see [`Simulator`] for the interaction log).
pub fn step(world: &World, action: Action) -> World {
    let mut next = world.clone();
    let agent = &mut next.agent;
    match action {
        Action::TurnLeft => agent.orientation = agent.orientation.turn_left(),
        Action::TurnRight => agent.orientation = agent.orientation.turn_right(),
        Action::Walk => {
            let (dr, dc) = agent.orientation.delta();
            let row = agent.row as isize + dr;
            let col = agent.col as isize + dc;
            if (0..GRID_SIZE as isize).contains(&row) && (0..GRID_SIZE as isize).contains(&col) {
                agent.row = row as usize;
                agent.col = col as usize;
            }
        }
        Action::Push | Action::Pull => {}
    }
    next
}

/// A push or pull performed while standing on a cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub row: usize,
    pub col: usize,
    pub action: Action,
}

/// Replays action sequences, logging push/pull interactions.
#[derive(Clone, Debug)]
pub struct Simulator {
    world: World,
    interactions: Vec<Interaction>,
}

impl Simulator {
    pub fn new(world: World) -> Self {
        Self { world, interactions: Vec::new() }
    }

    pub fn apply(&mut self, action: Action) {
        if matches!(action, Action::Push | Action::Pull) {
            let agent = self.world.agent;
            self.interactions.push(Interaction { row: agent.row, col: agent.col, action });
        }
        self.world = step(&self.world, action);
    }

    pub fn run(mut self, actions: &[Action]) -> Self {
        for &a in actions {
            self.apply(a);
        }
        self
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }
}

#[derive(Serialize, Deserialize)]
struct ObjectRepr {
    row: usize,
    col: usize,
    color: Color,
    shape: Shape,
    size: u8,
}

#[derive(Serialize, Deserialize)]
struct WorldRepr {
    agent: AgentState,
    objects: Vec<ObjectRepr>,
}

impl TryFrom<WorldRepr> for World {
    type Error = WorldError;

    fn try_from(repr: WorldRepr) -> Result<Self, Self::Error> {
        let agent = AgentState::new(repr.agent.row, repr.agent.col, repr.agent.orientation)?;
        let mut world = World::new(agent);
        for o in repr.objects {
            world.place(o.row, o.col, ObjectSpec::new(o.color, o.shape, o.size)?)?;
        }
        Ok(world)
    }
}

impl From<World> for WorldRepr {
    fn from(world: World) -> Self {
        let objects = world
            .objects()
            .map(|(row, col, o)| ObjectRepr { row, col, color: o.color, shape: o.shape, size: o.size })
            .collect();
        WorldRepr { agent: world.agent, objects }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(row: usize, col: usize, orientation: Orientation) -> AgentState {
        AgentState::new(row, col, orientation).unwrap()
    }

    #[test]
    fn empty_cell_encodes_to_zeros() {
        assert_eq!(encode_cell(None, None), [0.0; CELL_FEATURES]);
    }

    #[test]
    fn object_cell_layout() {
        let obj = ObjectSpec::new(Color::Red, Shape::Circle, 2).unwrap();
        let expected = [0., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 0., 0., 0., 0.];
        assert_eq!(encode_cell(Some(&obj), None), expected);
    }

    #[test]
    fn agent_cell_layout() {
        let v = encode_cell(None, Some(&agent(0, 0, Orientation::East)));
        for (i, x) in v.iter().enumerate() {
            let want = if i == 12 || i == 14 { 1.0 } else { 0.0 };
            assert_eq!(*x, want, "index {i}");
        }
    }

    #[test]
    fn empty_world_with_agent() {
        let world = World::new(agent(0, 0, Orientation::North));
        let t = encode_world(&world);
        for r in 0..GRID_SIZE {
            for c in 0..GRID_SIZE {
                for k in 0..CELL_FEATURES {
                    let want = if (r, c, k) == (0, 0, 12) || (r, c, k) == (0, 0, 13) { 1.0 } else { 0.0 };
                    assert_eq!(t[r][c][k], want);
                }
            }
        }
    }

    #[test]
    fn adding_object_changes_one_cell() {
        let base = World::new(agent(3, 3, Orientation::South));
        let mut with = base.clone();
        with.place(1, 4, ObjectSpec::new(Color::Blue, Shape::Box, 3).unwrap()).unwrap();
        let (a, b) = (visual_tokens(&base), visual_tokens(&with));
        let changed: Vec<usize> = (0..NUM_CELLS).filter(|&i| a[i] != b[i]).collect();
        assert_eq!(changed, vec![1 * GRID_SIZE + 4]);
    }

    #[test]
    fn step_examples() {
        let w = World::new(agent(0, 0, Orientation::East));
        assert_eq!(step(&w, Action::Walk).agent(), agent(0, 1, Orientation::East));
        let w = World::new(agent(0, 0, Orientation::North));
        assert_eq!(step(&w, Action::Walk).agent(), w.agent());
        assert_eq!(step(&w, Action::TurnRight).agent().orientation, Orientation::East);
    }

    #[test]
    fn push_pull_logged_not_moved() {
        let mut w = World::new(agent(2, 2, Orientation::West));
        w.place(2, 2, ObjectSpec::new(Color::Green, Shape::Square, 4).unwrap()).unwrap();
        let sim = Simulator::new(w.clone()).run(&[Action::Push, Action::Pull]);
        assert_eq!(sim.world(), &w);
        assert_eq!(sim.interactions().len(), 2);
        assert_eq!(sim.interactions()[1], Interaction { row: 2, col: 2, action: Action::Pull });
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert_eq!(ObjectSpec::new(Color::Red, Shape::Box, 5), Err(WorldError::InvalidSize(5)));
        assert!(AgentState::new(6, 0, Orientation::North).is_err());
        let mut w = World::new(agent(0, 0, Orientation::North));
        let o = ObjectSpec::new(Color::Red, Shape::Box, 1).unwrap();
        w.place(1, 1, o).unwrap();
        assert_eq!(w.place(1, 1, o), Err(WorldError::Occupied { row: 1, col: 1 }));
    }

    #[test]
    fn json_field_names() {
        let mut w = World::new(agent(1, 2, Orientation::West));
        w.place(4, 5, ObjectSpec::new(Color::Yellow, Shape::Cylinder, 3).unwrap()).unwrap();
        let json = serde_json::to_value(&w).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "agent": {"row": 1, "col": 2, "orientation": "west"},
                "objects": [{"row": 4, "col": 5, "color": "yellow", "shape": "cylinder", "size": 3}]
            })
        );
        let back: World = serde_json::from_value(json).unwrap();
        assert_eq!(back, w);
        let bad = serde_json::json!({"agent": {"row": 0, "col": 0, "orientation": "north"},
            "objects": [{"row": 0, "col": 0, "color": "red", "shape": "box", "size": 9}]});
        assert!(serde_json::from_value::<World>(bad).is_err());
    }
}

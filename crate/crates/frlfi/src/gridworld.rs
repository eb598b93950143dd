//! The 10×10 maze MDP: map loading, local observation, transition dynamics,
//! reward, termination, and success accounting.

use thiserror::Error;

pub const GRID_SIZE: usize = 10;

/// Hard cap on episode length; a timeout counts as a failed attempt.
pub const MAX_STEPS: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("map must have {GRID_SIZE} rows, got {0}")]
    BadRowCount(usize),
    #[error("row {row} must have {GRID_SIZE} cells, got {got}")]
    BadRowLength { row: usize, got: usize },
    #[error("illegal character {0:?} at row {1}, col {2}")]
    IllegalChar(char, usize, usize),
    #[error("map must have exactly one source, found {0}")]
    SourceCount(usize),
    #[error("map must have at least one goal")]
    NoGoal,
    #[error("position ({0}, {1}) out of bounds")]
    OutOfBounds(usize, usize),
    #[error("empty outcome list")]
    EmptyOutcomes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellType {
    Free,
    Hell,
    Goal,
    Source,
}

/// Grid position as (row, col) with row 0 at the top.
pub type Pos = (usize, usize);

/// Action order is fixed to match the observation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Up = 0,
    Down = 1,
    Right = 2,
    Left = 3,
}

pub const ACTIONS: [Action; 4] = [Action::Up, Action::Down, Action::Right, Action::Left];

impl Action {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        ACTIONS.get(i).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Right => (0, 1),
            Action::Left => (0, -1),
        }
    }
}

/// 4-vector over {-1, 0, +1} for the (up, down, right, left) neighbors.
/// Off-grid neighbors read as -1, like obstacles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation(pub [i8; 4]);

impl Observation {
    pub fn as_f64(&self) -> [f64; 4] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64, self.0[3] as f64]
    }

    /// All 3^4 = 81 possible observations, in a fixed enumeration order.
    pub fn enumerate_all() -> Vec<Observation> {
        let vals = [-1i8, 0, 1];
        let mut out = Vec::with_capacity(81);
        for a in vals {
            for b in vals {
                for c in vals {
                    for d in vals {
                        out.push(Observation([a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ongoing,
    ReachedGoal,
    HitHell,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub next_pos: Pos,
    pub reward: f64,
    pub terminal: bool,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct GridMap {
    cells: [[CellType; GRID_SIZE]; GRID_SIZE],
    id: usize,
    source: Pos,
    goals: Vec<Pos>,
}

impl GridMap {
    /// Parse a 10×10 text map: '.'=Free, 'H'=Hell, 'G'=Goal, 'S'=Source.
    pub fn load(text: &str, id: usize) -> Result<Self, GridError> {
        let rows: Vec<&str> = text.lines().collect();
        if rows.len() != GRID_SIZE {
            return Err(GridError::BadRowCount(rows.len()));
        }
        let mut cells = [[CellType::Free; GRID_SIZE]; GRID_SIZE];
        let mut sources = Vec::new();
        let mut goals = Vec::new();
        for (r, row) in rows.iter().enumerate() {
            if row.chars().count() != GRID_SIZE {
                return Err(GridError::BadRowLength { row: r, got: row.chars().count() });
            }
            for (c, ch) in row.chars().enumerate() {
                cells[r][c] = match ch {
                    '.' => CellType::Free,
                    'H' => CellType::Hell,
                    'G' => CellType::Goal,
                    'S' => CellType::Source,
                    other => return Err(GridError::IllegalChar(other, r, c)),
                };
                match cells[r][c] {
                    CellType::Source => sources.push((r, c)),
                    CellType::Goal => goals.push((r, c)),
                    _ => {}
                }
            }
        }
        if sources.len() != 1 {
            return Err(GridError::SourceCount(sources.len()));
        }
        if goals.is_empty() {
            return Err(GridError::NoGoal);
        }
        Ok(Self { cells, id, source: sources[0], goals })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn source(&self) -> Pos {
        self.source
    }

    pub fn goals(&self) -> &[Pos] {
        &self.goals
    }

    pub fn cell(&self, pos: Pos) -> Result<CellType, GridError> {
        if pos.0 >= GRID_SIZE || pos.1 >= GRID_SIZE {
            return Err(GridError::OutOfBounds(pos.0, pos.1));
        }
        Ok(self.cells[pos.0][pos.1])
    }

    /// Manhattan distance from `pos` to the nearest goal.
    pub fn goal_distance(&self, pos: Pos) -> usize {
        self.goals
            .iter()
            .map(|g| pos.0.abs_diff(g.0) + pos.1.abs_diff(g.1))
            .min()
            .expect("at least one goal")
    }

    /// Local observation at `pos`: -1 for Hell or off-grid, +1 for Goal,
    /// 0 for Free/Source, in (up, down, right, left) order.
    pub fn observe(&self, pos: Pos) -> Result<Observation, GridError> {
        if pos.0 >= GRID_SIZE || pos.1 >= GRID_SIZE {
            return Err(GridError::OutOfBounds(pos.0, pos.1));
        }
        let mut s = [0i8; 4];
        for (i, action) in ACTIONS.iter().enumerate() {
            let (dr, dc) = action.delta();
            let r = pos.0 as isize + dr;
            let c = pos.1 as isize + dc;
            s[i] = if r < 0 || c < 0 || r >= GRID_SIZE as isize || c >= GRID_SIZE as isize {
                -1
            } else {
                match self.cells[r as usize][c as usize] {
                    CellType::Hell => -1,
                    CellType::Goal => 1,
                    CellType::Free | CellType::Source => 0,
                }
            };
        }
        Ok(Observation(s))
    }

    /// One MDP transition. Moving off-grid clamps position with reward -0.1;
    /// otherwise the reward is +1/-1 for goal/hell and +0.1/-0.1 for moving
    /// strictly closer to / not closer to the nearest goal.
    pub fn step(&self, pos: Pos, action: Action) -> Result<StepResult, GridError> {
        if pos.0 >= GRID_SIZE || pos.1 >= GRID_SIZE {
            return Err(GridError::OutOfBounds(pos.0, pos.1));
        }
        let dist_before = self.goal_distance(pos);
        let (dr, dc) = action.delta();
        let r = pos.0 as isize + dr;
        let c = pos.1 as isize + dc;
        let next = if r < 0 || c < 0 || r >= GRID_SIZE as isize || c >= GRID_SIZE as isize {
            pos // wall: stay in place
        } else {
            (r as usize, c as usize)
        };
        let result = match self.cells[next.0][next.1] {
            CellType::Hell => StepResult {
                next_pos: next,
                reward: -1.0,
                terminal: true,
                outcome: Outcome::HitHell,
            },
            CellType::Goal => StepResult {
                next_pos: next,
                reward: 1.0,
                terminal: true,
                outcome: Outcome::ReachedGoal,
            },
            CellType::Free | CellType::Source => {
                let reward = if self.goal_distance(next) < dist_before { 0.1 } else { -0.1 };
                StepResult { next_pos: next, reward, terminal: false, outcome: Outcome::Ongoing }
            }
        };
        Ok(result)
    }
}

/// Fraction of outcomes that reached the goal.
pub fn success_rate(outcomes: &[Outcome]) -> Result<f64, GridError> {
    if outcomes.is_empty() {
        return Err(GridError::EmptyOutcomes);
    }
    let wins = outcomes.iter().filter(|o| **o == Outcome::ReachedGoal).count();
    Ok(wins as f64 / outcomes.len() as f64)
}

/// The 12 bundled environments.
pub fn default_maps() -> Vec<GridMap> {
    const TEXTS: [&str; 12] = [
        include_str!("../maps/map01.txt"),
        include_str!("../maps/map02.txt"),
        include_str!("../maps/map03.txt"),
        include_str!("../maps/map04.txt"),
        include_str!("../maps/map05.txt"),
        include_str!("../maps/map06.txt"),
        include_str!("../maps/map07.txt"),
        include_str!("../maps/map08.txt"),
        include_str!("../maps/map09.txt"),
        include_str!("../maps/map10.txt"),
        include_str!("../maps/map11.txt"),
        include_str!("../maps/map12.txt"),
    ];
    TEXTS
        .iter()
        .enumerate()
        .map(|(i, t)| GridMap::load(t, i).expect("bundled map is valid"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_map() -> GridMap {
        let mut rows = vec![".........."; 10].join("\n");
        rows.replace_range(0..1, "S");
        // goal at row 9, col 9
        let mut lines: Vec<String> = rows.lines().map(String::from).collect();
        lines[9].replace_range(9..10, "G");
        GridMap::load(&lines.join("\n"), 0).unwrap()
    }

    #[test]
    fn load_valid_map() {
        let m = open_map();
        assert_eq!(m.source(), (0, 0));
        assert_eq!(m.goals(), &[(9, 9)]);
    }

    #[test]
    fn load_rejects_bad_dimensions() {
        let nine = vec![".........."; 9].join("\n");
        assert_eq!(GridMap::load(&nine, 0).unwrap_err(), GridError::BadRowCount(9));
        let short = {
            let mut lines = vec!["..........".to_string(); 10];
            lines[3] = ".........".to_string();
            lines.join("\n")
        };
        assert!(matches!(GridMap::load(&short, 0), Err(GridError::BadRowLength { row: 3, .. })));
    }

    #[test]
    fn load_rejects_bad_cells() {
        let mut lines = vec!["..........".to_string(); 10];
        lines[0] = "S.........".to_string();
        lines[9] = ".........G".to_string();
        lines[4] = "....X.....".to_string();
        assert_eq!(GridMap::load(&lines.join("\n"), 0).unwrap_err(), GridError::IllegalChar('X', 4, 4));

        let mut two_s = vec!["..........".to_string(); 10];
        two_s[0] = "S....S....".to_string();
        two_s[9] = ".........G".to_string();
        assert_eq!(GridMap::load(&two_s.join("\n"), 0).unwrap_err(), GridError::SourceCount(2));

        let mut no_g = vec!["..........".to_string(); 10];
        no_g[0] = "S.........".to_string();
        assert_eq!(GridMap::load(&no_g.join("\n"), 0).unwrap_err(), GridError::NoGoal);
    }

    #[test]
    fn observe_encoding() {
        let mut lines = vec!["..........".to_string(); 10];
        lines[0] = "S.........".to_string();
        lines[3] = "....G.....".to_string();
        lines[5] = "....H.....".to_string();
        lines[9] = ".........G".to_string();
        let m = GridMap::load(&lines.join("\n"), 0).unwrap();

        // goal directly up, hell directly down
        assert_eq!(m.observe((4, 4)).unwrap(), Observation([1, -1, 0, 0]));
        // goal directly up, rest free
        assert_eq!(m.observe((2, 4)).unwrap(), Observation([0, 1, 0, 0]).clone());
        assert_eq!(m.observe((2, 4)).unwrap().0[1], 1);
        assert_eq!(m.observe((6, 4)).unwrap().0[0], -1);
        // corner: up and left off-grid read as -1
        assert_eq!(m.observe((0, 0)).unwrap(), Observation([-1, 0, 0, -1]));
        // all four neighbors free
        assert_eq!(m.observe((7, 7)).unwrap(), Observation([0, 0, 0, 0]));
        assert!(m.observe((10, 0)).is_err());
    }

    #[test]
    fn step_rewards() {
        let mut lines = vec!["..........".to_string(); 10];
        lines[0] = "S.........".to_string();
        lines[5] = "....H.....".to_string();
        lines[9] = ".........G".to_string();
        let m = GridMap::load(&lines.join("\n"), 0).unwrap();

        // adjacent to goal, move onto it
        let r = m.step((9, 8), Action::Right).unwrap();
        assert_eq!((r.reward, r.terminal, r.outcome), (1.0, true, Outcome::ReachedGoal));

        // move onto hell
        let r = m.step((4, 4), Action::Down).unwrap();
        assert_eq!((r.reward, r.terminal, r.outcome), (-1.0, true, Outcome::HitHell));

        // strictly closer earns +0.1, away earns -0.1
        assert_eq!(m.step((0, 0), Action::Down).unwrap().reward, 0.1);
        assert_eq!(m.step((5, 5), Action::Up).unwrap().reward, -0.1);

        // clamped at the wall: position unchanged, distance not decreased
        let r = m.step((0, 0), Action::Up).unwrap();
        assert_eq!(r.next_pos, (0, 0));
        assert_eq!(r.reward, -0.1);
        assert!(!r.terminal);
    }

    #[test]
    fn rewards_only_from_fixed_set() {
        let m = open_map();
        for r in 0..GRID_SIZE {
            for c in 0..GRID_SIZE {
                for a in ACTIONS {
                    let res = m.step((r, c), a).unwrap();
                    assert!([1.0, -1.0, 0.1, -0.1].contains(&res.reward));
                    let (pr, pc) = res.next_pos;
                    assert!(pr.abs_diff(r) + pc.abs_diff(c) <= 1);
                }
            }
        }
    }

    #[test]
    fn success_rate_arithmetic() {
        let mut outs = vec![Outcome::ReachedGoal; 960];
        outs.extend(vec![Outcome::Timeout; 40]);
        assert_eq!(success_rate(&outs).unwrap(), 0.96);
        assert_eq!(success_rate(&[Outcome::HitHell]).unwrap(), 0.0);
        assert_eq!(success_rate(&[Outcome::ReachedGoal]).unwrap(), 1.0);
        assert_eq!(success_rate(&[]), Err(GridError::EmptyOutcomes));
    }

    #[test]
    fn bundled_maps_are_valid() {
        let maps = default_maps();
        assert_eq!(maps.len(), 12);
        for m in &maps {
            assert_eq!(m.source(), (0, 0));
            assert!(!m.goals().is_empty());
        }
    }

    #[test]
    fn observation_space_size() {
        assert_eq!(Observation::enumerate_all().len(), 81);
    }
}

//! Colliding particles on a grid, observed frame by frame. Two particles
//! drift with Gaussian velocities; a collision happens whenever their
//! rasterized cells coincide (movement is unaffected). Questions ask for the
//! quadrant of the last collision — of a queried color pair in the hard
//! version, or plain recency-based in the easy version.

use serde::{Deserialize, Serialize};

use super::TaskSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::train::TaskStream;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionConfig {
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "default_colors")]
    pub n_colors: usize,
    #[serde(default = "default_color_change")]
    pub color_change_prob: f64,
    #[serde(default = "default_matched_rate")]
    pub matched_query_rate: f64,
    pub episode_steps: usize,
    #[serde(default)]
    pub easy_mode: bool,
    /// Questions are asked every this many timesteps.
    #[serde(default = "default_question_interval")]
    pub question_interval: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
}

fn default_grid() -> usize {
    16
}
fn default_colors() -> usize {
    5
}
fn default_color_change() -> f64 {
    0.05
}
fn default_matched_rate() -> f64 {
    0.4
}
fn default_question_interval() -> usize {
    64
}
fn default_eval_episodes() -> usize {
    8
}

impl CollisionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size {} must be >= 2", self.grid_size)));
        }
        for (name, p) in
            [("color_change_prob", self.color_change_prob), ("matched_query_rate", self.matched_query_rate)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} must be in [0,1]")));
            }
        }
        if self.episode_steps == 0 || self.question_interval == 0 {
            return Err(Error::Config("episode_steps and question_interval must be positive".into()));
        }
        Ok(())
    }

    /// Tokens emitted per timestep: 4 coordinates plus colors and question
    /// slots (hard), or 4 coordinates plus two question slots (easy).
    pub fn tokens_per_step(&self) -> usize {
        if self.easy_mode {
            6
        } else {
            8
        }
    }

    // Token id layout. Coordinates first, then quadrants, then the rest.
    pub fn tok_coord(&self, v: usize) -> usize {
        debug_assert!(v < self.grid_size);
        v
    }
    pub fn tok_quadrant(&self, q: usize) -> usize {
        debug_assert!(q < 4);
        self.grid_size + q
    }
    pub fn tok_color(&self, c: usize) -> usize {
        debug_assert!(c < self.n_colors);
        self.grid_size + 4 + c
    }
    pub fn tok_noq(&self) -> usize {
        self.grid_size + 4 + if self.easy_mode { 0 } else { self.n_colors }
    }
    pub fn tok_qtype1(&self) -> usize {
        debug_assert!(self.easy_mode);
        self.tok_noq() + 1
    }
    pub fn tok_qtype2(&self) -> usize {
        self.tok_noq() + 2
    }
    pub fn tok_cont(&self) -> usize {
        self.tok_noq() + 3
    }
    pub fn tok_ans(&self) -> usize {
        self.tok_noq() + 4
    }

    pub fn vocab_size(&self) -> usize {
        if self.easy_mode {
            // coords + quadrants + NOQ/QTYPE1/QTYPE2/CONT/ANS
            self.grid_size + 4 + 5
        } else {
            // coords + quadrants + colors + NOQ
            self.grid_size + 4 + self.n_colors + 1
        }
    }
}

/// Continuous particle state.
#[derive(Clone, Copy, Debug)]
struct Particle {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    color: usize,
}

#[derive(Clone, Debug)]
pub struct Collision {
    pub step: usize,
    pub quadrant: usize,
    pub colors: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct EpisodeStep {
    pub cells: [(usize, usize); 2],
    pub colors: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    pub collisions: Vec<Collision>,
}

/// Rasterization is floor of the continuous coordinate.
pub fn rasterize(v: f64) -> usize {
    v.floor() as usize
}

/// Quadrants split the grid at grid/2 with the lower half-open: cells
/// 0..grid/2 are the low side. Index = 2*(y high) + (x high).
pub fn quadrant_of(cx: usize, cy: usize, grid: usize) -> usize {
    let half = grid / 2;
    2 * usize::from(cy >= half) + usize::from(cx >= half)
}

/// Simulate one episode: velocities resample when a step would leave the
/// grid (bounded retries, then the position clamps), colors flip with the
/// configured probability each step, collisions are logged whenever the two
/// rasterized cells coincide.
pub fn simulate_collision(cfg: &CollisionConfig, rng: &mut Rng) -> Episode {
    let g = cfg.grid_size as f64;
    let mut particles: Vec<Particle> = (0..2)
        .map(|_| Particle {
            x: rng.uniform(0.0, g),
            y: rng.uniform(0.0, g),
            vx: rng.normal(),
            vy: rng.normal(),
            color: rng.below(cfg.n_colors),
        })
        .collect();

    let mut steps = Vec::with_capacity(cfg.episode_steps);
    let mut collisions = Vec::new();

    for step in 0..cfg.episode_steps {
        for p in particles.iter_mut() {
            let mut moved = false;
            for _try in 0..20 {
                let nx = p.x + p.vx;
                let ny = p.y + p.vy;
                if (0.0..g).contains(&nx) && (0.0..g).contains(&ny) {
                    p.x = nx;
                    p.y = ny;
                    moved = true;
                    break;
                }
                p.vx = rng.normal();
                p.vy = rng.normal();
            }
            if !moved {
                // pathological corner: clamp strictly inside
                p.x = (p.x + p.vx).clamp(0.0, g - 1e-9);
                p.y = (p.y + p.vy).clamp(0.0, g - 1e-9);
            }
            if !cfg.easy_mode && rng.chance(cfg.color_change_prob) {
                p.color = rng.below(cfg.n_colors);
            }
        }
        let cells = [
            (rasterize(particles[0].x), rasterize(particles[0].y)),
            (rasterize(particles[1].x), rasterize(particles[1].y)),
        ];
        let colors = (particles[0].color, particles[1].color);
        if cells[0] == cells[1] {
            collisions.push(Collision {
                step,
                quadrant: quadrant_of(cells[0].0, cells[0].1, cfg.grid_size),
                colors,
            });
        }
        steps.push(EpisodeStep { cells, colors });
    }
    Episode { steps, collisions }
}

/// Turn an episode into a token sequence with interleaved questions.
pub fn tokenize_collision(episode: &Episode, cfg: &CollisionConfig, rng: &mut Rng) -> TaskSample {
    if cfg.easy_mode {
        tokenize_easy(episode, cfg, rng)
    } else {
        tokenize_hard(episode, cfg, rng)
    }
}

fn is_question_step(step: usize, cfg: &CollisionConfig) -> bool {
    (step + 1) % cfg.question_interval == 0
}

fn tokenize_hard(episode: &Episode, cfg: &CollisionConfig, rng: &mut Rng) -> TaskSample {
    let w = cfg.tokens_per_step();
    let len = episode.steps.len() * w;
    let mut input = Vec::with_capacity(len);
    let mut target = vec![cfg.tok_noq(); len];
    let mut mask = vec![false; len];

    for (step, st) in episode.steps.iter().enumerate() {
        input.extend([
            cfg.tok_coord(st.cells[0].0),
            cfg.tok_coord(st.cells[0].1),
            cfg.tok_coord(st.cells[1].0),
            cfg.tok_coord(st.cells[1].1),
            cfg.tok_color(st.colors.0),
            cfg.tok_color(st.colors.1),
        ]);
        let seen: Vec<&Collision> =
            episode.collisions.iter().filter(|c| c.step <= step).collect();
        if is_question_step(step, cfg) && !seen.is_empty() {
            let last = seen.last().unwrap();
            let query = if rng.chance(cfg.matched_query_rate) {
                last.colors
            } else {
                // any colors some past collision had; resample until answerable
                let mut q = (rng.below(cfg.n_colors), rng.below(cfg.n_colors));
                let mut tries = 0;
                while !seen.iter().any(|c| c.colors == q) {
                    q = (rng.below(cfg.n_colors), rng.below(cfg.n_colors));
                    tries += 1;
                    if tries > 50 {
                        q = last.colors;
                        break;
                    }
                }
                q
            };
            let answer = seen.iter().rev().find(|c| c.colors == query).unwrap();
            input.extend([cfg.tok_color(query.0), cfg.tok_color(query.1)]);
            let ans_pos = input.len() - 1;
            target[ans_pos] = cfg.tok_quadrant(answer.quadrant);
            mask[ans_pos] = true;
        } else {
            input.extend([cfg.tok_noq(), cfg.tok_noq()]);
        }
    }
    TaskSample { input_tokens: input, target_tokens: target, loss_mask: mask }
}

fn tokenize_easy(episode: &Episode, cfg: &CollisionConfig, rng: &mut Rng) -> TaskSample {
    let w = cfg.tokens_per_step();
    let len = episode.steps.len() * w;
    let mut input = Vec::with_capacity(len);
    let mut target = vec![cfg.tok_noq(); len];
    let mut mask = vec![false; len];
    // quadrants of answers pending on the next steps' answer slots
    let mut pending: Vec<usize> = Vec::new();

    for (step, st) in episode.steps.iter().enumerate() {
        input.extend([
            cfg.tok_coord(st.cells[0].0),
            cfg.tok_coord(st.cells[0].1),
            cfg.tok_coord(st.cells[1].0),
            cfg.tok_coord(st.cells[1].1),
        ]);
        let seen: Vec<&Collision> =
            episode.collisions.iter().filter(|c| c.step <= step).collect();
        if !pending.is_empty() {
            // continuation of a 3-part answer
            input.extend([cfg.tok_cont(), cfg.tok_ans()]);
            let ans_pos = input.len() - 1;
            target[ans_pos] = cfg.tok_quadrant(pending.remove(0));
            mask[ans_pos] = true;
        } else if is_question_step(step, cfg) && !seen.is_empty() {
            // type (ii) asks for the last three collisions, oldest first;
            // needs two more steps to carry the remaining answers
            let want_mapping =
                seen.len() >= 3 && step + 2 < episode.steps.len() && rng.chance(0.5);
            if want_mapping {
                let n = seen.len();
                let quads = [seen[n - 3].quadrant, seen[n - 2].quadrant, seen[n - 1].quadrant];
                input.extend([cfg.tok_qtype2(), cfg.tok_ans()]);
                let ans_pos = input.len() - 1;
                target[ans_pos] = cfg.tok_quadrant(quads[0]);
                mask[ans_pos] = true;
                pending.extend([quads[1], quads[2]]);
            } else {
                input.extend([cfg.tok_qtype1(), cfg.tok_ans()]);
                let ans_pos = input.len() - 1;
                target[ans_pos] = cfg.tok_quadrant(seen.last().unwrap().quadrant);
                mask[ans_pos] = true;
            }
        } else {
            input.extend([cfg.tok_noq(), cfg.tok_noq()]);
        }
    }
    TaskSample { input_tokens: input, target_tokens: target, loss_mask: mask }
}

pub struct CollisionTask {
    pub cfg: CollisionConfig,
}

const STREAM_TRAIN: u64 = 0xC011;
const STREAM_EVAL: u64 = 0xE7A1;

impl CollisionTask {
    /// Episodes occasionally score nothing (no collision before any
    /// question); skip to the next index until one qualifies.
    fn gen(&self, stream: u64, index: u64) -> TaskSample {
        for attempt in 0..64 {
            let mut rng = Rng::for_stream(self.cfg.seed, stream, index * 64 + attempt);
            let ep = simulate_collision(&self.cfg, &mut rng);
            let sample = tokenize_collision(&ep, &self.cfg, &mut rng);
            if sample.loss_mask.iter().any(|&m| m) {
                return sample;
            }
        }
        panic!(
            "no scoreable episode in 64 attempts; episode_steps {} or grid {} too tight",
            self.cfg.episode_steps, self.cfg.grid_size
        );
    }
}

impl TaskStream for CollisionTask {
    fn sample(&self, index: u64) -> TaskSample {
        self.gen(STREAM_TRAIN, index)
    }

    fn eval_set(&self) -> Vec<TaskSample> {
        (0..self.cfg.eval_episodes as u64).map(|i| self.gen(STREAM_EVAL, i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(easy: bool) -> CollisionConfig {
        CollisionConfig {
            grid_size: 16,
            n_colors: 5,
            color_change_prob: 0.05,
            matched_query_rate: 0.4,
            episode_steps: 256,
            easy_mode: easy,
            question_interval: 64,
            seed: 7,
            eval_episodes: 2,
        }
    }

    #[test]
    fn rasterization_and_quadrants() {
        // (3.2, 3.9) and (3.7, 3.1) land in the same cell (3,3)
        assert_eq!((rasterize(3.2), rasterize(3.9)), (3, 3));
        assert_eq!((rasterize(3.7), rasterize(3.1)), (3, 3));
        // quadrant boundaries: cells 0-7 low, 8-15 high
        assert_eq!(quadrant_of(0, 0, 16), 0);
        assert_eq!(quadrant_of(7, 7, 16), 0);
        assert_eq!(quadrant_of(8, 7, 16), 1);
        assert_eq!(quadrant_of(7, 8, 16), 2);
        assert_eq!(quadrant_of(15, 15, 16), 3);
    }

    #[test]
    fn every_cell_maps_to_exactly_one_quadrant() {
        let mut counts = [0usize; 4];
        for cx in 0..16 {
            for cy in 0..16 {
                counts[quadrant_of(cx, cy, 16)] += 1;
            }
        }
        assert_eq!(counts, [64, 64, 64, 64]);
    }

    #[test]
    fn zero_velocity_means_no_motion() {
        // Degenerate dynamics: freeze velocities by construction and verify
        // collision iff same start cell. Uses the internal stepping rule
        // directly: position + 0 stays put, so the episode is constant.
        let c = cfg(false);
        let mut rng = Rng::new(1);
        let ep = simulate_collision(&c, &mut rng);
        // velocities are generally nonzero; instead check positions only
        // change by the drawn velocity per step (no teleporting)
        for w in ep.steps.windows(2) {
            for p in 0..2 {
                let (ax, ay) = w[0].cells[p];
                let (bx, by) = w[1].cells[p];
                // Gaussian steps rarely jump more than 6 cells
                assert!((ax as i64 - bx as i64).abs() <= 8);
                assert!((ay as i64 - by as i64).abs() <= 8);
            }
        }
    }

    #[test]
    fn collisions_are_logged_when_cells_match() {
        let c = cfg(false);
        let mut rng = Rng::new(3);
        let ep = simulate_collision(&c, &mut rng);
        for col in &ep.collisions {
            let st = &ep.steps[col.step];
            assert_eq!(st.cells[0], st.cells[1]);
            assert_eq!(col.quadrant, quadrant_of(st.cells[0].0, st.cells[0].1, 16));
        }
    }

    #[test]
    fn collision_rate_regression_pin() {
        // Monte-Carlo estimate of the per-step collision probability for
        // unit-Gaussian velocities on a 16x16 grid, pinned once with a wide
        // band as a regression guard.
        let c = CollisionConfig { episode_steps: 2000, ..cfg(false) };
        let mut total_steps = 0usize;
        let mut total_cols = 0usize;
        for seed in 0..50 {
            let mut rng = Rng::new(seed);
            let ep = simulate_collision(&c, &mut rng);
            total_steps += ep.steps.len();
            total_cols += ep.collisions.len();
        }
        let rate = total_cols as f64 / total_steps as f64;
        assert!(
            (0.004..0.012).contains(&rate),
            "collision rate drifted: {rate} over {total_steps} steps"
        );
    }

    #[test]
    fn hard_tokenization_shape_and_queries() {
        // denser grid so collisions appear before the question steps
        let mut c = cfg(false);
        c.grid_size = 8;
        let mut rng = Rng::new(11);
        let ep = simulate_collision(&c, &mut rng);
        let s = tokenize_collision(&ep, &c, &mut rng);
        assert_eq!(s.len(), c.episode_steps * 8);
        s.validate().unwrap();
        // every scored position is the last slot of a question step and its
        // target is the quadrant of the most recent matching collision
        for (pos, (&m, &t)) in s.loss_mask.iter().zip(&s.target_tokens).enumerate() {
            if !m {
                continue;
            }
            let step = pos / 8;
            assert_eq!(pos % 8, 7, "answers only at the final question slot");
            assert!(is_question_step(step, &c));
            assert!((c.tok_quadrant(0)..=c.tok_quadrant(3)).contains(&t));
            let q1 = s.input_tokens[pos - 1];
            let q2 = s.input_tokens[pos];
            let colors = (q1 - c.tok_color(0), q2 - c.tok_color(0));
            let answer = ep
                .collisions
                .iter()
                .rev()
                .find(|col| col.step <= step && col.colors == colors)
                .expect("query must be answerable");
            assert_eq!(t, c.tok_quadrant(answer.quadrant));
        }
    }

    #[test]
    fn easy_tokenization_has_six_tokens_and_three_part_answers() {
        let mut c = cfg(true);
        c.grid_size = 6;
        c.question_interval = 32;
        c.episode_steps = 512;
        let mut rng = Rng::new(5);
        let ep = simulate_collision(&c, &mut rng);
        let s = tokenize_collision(&ep, &c, &mut rng);
        assert_eq!(s.len(), c.episode_steps * 6);
        // find a type (ii) question and verify its three answers are the
        // last three collisions' quadrants in order
        let mut found_mapping = false;
        for pos in 0..s.len() {
            if s.input_tokens[pos] == c.tok_qtype2() {
                found_mapping = true;
                let step = pos / 6;
                let seen: Vec<&Collision> =
                    ep.collisions.iter().filter(|col| col.step <= step).collect();
                let n = seen.len();
                assert!(n >= 3);
                let expect = [
                    seen[n - 3].quadrant,
                    seen[n - 2].quadrant,
                    seen[n - 1].quadrant,
                ];
                for (j, q) in expect.iter().enumerate() {
                    let ans_pos = pos + 1 + j * 6;
                    assert!(s.loss_mask[ans_pos]);
                    assert_eq!(s.target_tokens[ans_pos], c.tok_quadrant(*q));
                }
            }
        }
        assert!(found_mapping, "seed produced no mapping question; pick another");
    }

    #[test]
    fn generators_are_pure_in_config_and_seed() {
        let t = CollisionTask { cfg: cfg(true) };
        assert_eq!(t.sample(3), t.sample(3));
        assert_ne!(t.sample(3), t.sample(4));
    }
}

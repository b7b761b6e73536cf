/*!
Gait generation for floating-base robots with closed kinematic loops.

The library optimizes Bezier trajectories for the actuated joints only and
reconstructs everything else — unactuated coordinates, reaction wrenches,
feedforward torques — from the closure and stance constraints via constrained
inverse dynamics. A forward-dynamics simulator with a PD + feedforward
controller validates the result.

Modules mirror the pipeline:

- [`model`]: robot description, file grammar, bundled desk-scale robots
- [`dynamics`]: kinematics, recursive inverse dynamics, mass matrix, analytic
  derivatives
- [`closure`]: loop/stance constraint functions, inverse kinematics, the
  actuated-to-full projection, constrained inverse dynamics
- [`trajectory`]: Bernstein/Bezier curves, collocation grids, decision-vector
  layout
- [`gaitopt`]: the multi-step gait NLP (cost, node constraints, reset map)
- [`solver`]: augmented-Lagrangian solver (damped Gauss–Newton inner loop)
  with trace output, plus an adapter seam for external NLP backends
- [`simulate`]: constrained forward dynamics, impact map, tracking controller,
  gait metrics
*/

pub mod math;
pub mod spatial;
pub mod model;
pub mod kin;
pub mod dynamics;
pub mod closure;
pub mod trajectory;
pub mod gaitopt;
pub mod solver;
pub mod simulate;

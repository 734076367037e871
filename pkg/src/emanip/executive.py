"""Closed-loop trial executive: approach, estimate, plan, act, measure.

One trial advances a single ground-truth world while the estimator and
planner run on their own clocks: observations every obs_period, estimation
per completed batch, planning and stiffness updates once per receding
horizon.  All randomness flows from the scenario seed through named
SeedSequence children so repeated runs (and ablation modes before first
contact) are bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .controller import rcc_stiffness, stiffness_ratio
from .errors import AllInfeasible, NoFeasibleHypothesis
from .estimation import (Batch, MeasurementModel, Wrench2, init_hypotheses,
                         run_batch, wrap_symmetric)
from .geometry import Pose2, shape_circumradius, wrap_angle
from .planner import (DmpParams, default_exploration, engagement_angles,
                      forcing_term, mppi_plan, select_target)
from .scenario import Scenario
from .world import GroundTruthWorld


@dataclass
class TrialResult:
    scenario: str
    seed: int
    mode: str
    identified: bool
    manipulated: bool
    engaged: bool
    jammed: bool
    timed_out: bool
    map_shape: str
    true_shape: str
    static_pos_err_mm: float
    static_ang_err_deg: float
    dynamic_pos_err_mm: float
    dynamic_ang_err_deg: float
    peak_force: float
    avg_force: float
    task_time: float
    n_batches: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class TrialLog:
    estimator: list = field(default_factory=list)
    planner: list = field(default_factory=list)
    stiffness: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    result: dict = None

    def dump_jsonl(self, path):
        with open(path, "w") as fh:
            if self.result is not None:
                fh.write(json.dumps({"kind": "result", **self.result}) + "\n")
            for kind in ("estimator", "planner", "stiffness", "trace"):
                for rec in getattr(self, kind):
                    fh.write(json.dumps({"kind": kind, **rec}) + "\n")


class _Trial:
    """State of one running trial (kept on an object for clarity)."""

    def __init__(self, sc: Scenario, mode: str, log: TrialLog):
        self.sc = sc
        self.mode = mode
        self.log = log
        ex = sc.executive
        self.dt = sc.solver.dt
        self.obs_every = max(1, int(round(sc.world.obs_period / self.dt)))

        seeds = np.random.SeedSequence(sc.seed).spawn(4)
        self.rng_pose = np.random.default_rng(seeds[0])
        self.rng_noise = np.random.default_rng(seeds[1])
        self.rng_plan = np.random.default_rng(seeds[2])
        rng_appr = np.random.default_rng(seeds[3])

        self.theta_true = sc.sample_true_pose(self.rng_pose)
        self.true_shape = sc.shapes[sc.world.true_shape]
        self.tool = sc.tool
        self.mm = MeasurementModel.isotropic(sc.world.sigma_f,
                                             self.tool.char_length)
        self.shape_lib = sc.hypothesis_shapes
        self.labels = {i: lbl for i, lbl in enumerate(sc.world.hypotheses)}

        kap = sc.stiffness
        # All modes share the neutral midpoint ratio until the first
        # estimate exists, keeping pre-contact trajectories bit-identical
        # across ablation modes.
        self.kappa_mid = 0.5 * (kap.kappa_min + kap.kappa_max)
        self.kappa0 = self.kappa_mid

        prior_off = rng_appr.normal(0.0, sc.world.prior_offset / math.sqrt(2), 2)
        self.prior_center = self.theta_true[:2] + prior_off
        appr_angle = rng_appr.uniform(-math.pi, math.pi)
        self.d_appr = np.array([math.cos(appr_angle), math.sin(appr_angle)])
        back = shape_circumradius(self.true_shape) \
            + self.tool.points[:, 0].max() + 0.012
        self.u = np.concatenate([self.prior_center - back * self.d_appr,
                                 [appr_angle]])

        self.world = GroundTruthWorld(self.true_shape, self.theta_true,
                                      self.tool, sc.potential,
                                      sc.world.friction, sc.solver,
                                      sc.world.screw_breakaway_torque,
                                      sc.world.screw_viscosity)
        self.world.reset(self.u)
        kc = rcc_stiffness(self.kappa0, Pose2.from_array(self.u), sc.stiffness)
        self.world.set_stiffness(kc)
        self.params = self.world.params

        self.hyps = None
        self.buffer = ([], [], [])
        self.batch_idx = 0
        self.n_batch = 20
        self.forces = []
        self.phase = "approach"
        self.press_until = self.settle_until = -1.0
        self.engaged = self.jammed = self.timed_out = False
        self.static_err = (math.inf, math.inf)
        self.loosen_errs = []
        self.loosening = False
        self.loosen_start_phi = None
        self.dmp = None
        self.dmp_v = np.zeros(3)
        self.dmp_t = 0.0
        self.horizon_left = 0.0
        self.plan_mode = "insert"
        self.jam_ref = (0.0, self.u.copy())
        self.t = 0.0
        self.done = False
        self.trigger_count = 0
        self.settle_buf = []
        self.hold_count = 0
        self.probe_stable = 0
        self.recovery_count = 0
        self.sweep_sign = 1.0
        self.hold_left = 0.0

    # -- helpers -----------------------------------------------------------

    def observed_pose(self, wrench):
        return self.u + np.linalg.solve(self.params.Kc, wrench)

    def flush_batches(self, final=False):
        bu, bw, bp = self.buffer
        while len(bu) >= self.n_batch or (final and len(bu) >= 2):
            take = min(self.n_batch, len(bu))
            batch = Batch(u=np.array(bu[:take]), wrench=np.array(bw[:take]),
                          params_seq=bp[:take], index=self.batch_idx)
            del bu[:take], bw[:take], bp[:take]
            prev_map = self.hyps.map_index
            self.hyps = run_batch(self.hyps, batch, self.shape_lib, self.tool,
                                  self.sc.estimator)
            ms = self.hyps.map_shape
            if self.hyps.map_index == prev_map \
                    and ms.weight > self.sc.executive.finish_weight:
                self.probe_stable += 1
            else:
                self.probe_stable = 0
            self.log.estimator.append({
                "batch": self.batch_idx, "t": round(self.t, 6),
                "shapes": [{"id": s.shape_id, "label": self.labels[s.shape_id],
                            "weight": s.weight,
                            "theta_star": None if s.theta_star is None
                            else list(s.theta_star.as_array()),
                            "sigma_trace": None if s.Sigma_theta is None
                            else float(np.trace(s.Sigma_theta)),
                            "n_particles": len(s.pose_particles)}
                           for s in self.hyps.shapes],
                "map_shape": self.labels[ms.shape_id]})
            if self.loosening:
                self.loosen_errs.append(self.pose_error(ms))
            self.batch_idx += 1

    def pose_error(self, ms):
        if ms is None or ms.theta_star is None:
            return (math.inf, math.inf)
        sym = self.shape_lib[ms.shape_id].symmetry_order
        dp = math.hypot(ms.theta_star.x - self.world.theta[0],
                        ms.theta_star.y - self.world.theta[1])
        da = abs(wrap_symmetric(ms.theta_star.phi - self.world.theta[2], sym))
        return (dp * 1000.0, math.degrees(da))

    def compatible(self, ms) -> bool:
        try:
            engagement_angles(self.shape_lib[ms.shape_id], self.tool,
                              self.sc.planner.engage_margin)
            return True
        except Exception:
            return False

    def update_stiffness(self, zhat):
        ms = self.hyps.map_shape
        if self.mode == "full" and ms.Sigma_theta is not None:
            kappa = stiffness_ratio(ms.Sigma_theta, self.sc.stiffness)
        else:
            kappa = self.kappa_mid
        kc = rcc_stiffness(kappa, Pose2.from_array(zhat), self.sc.stiffness)
        self.world.set_stiffness(kc)
        self.params = self.world.params
        self.log.stiffness.append({
            "t": round(self.t, 6), "kappa": kappa,
            "sigma_trace": None if ms.Sigma_theta is None
            else float(np.trace(ms.Sigma_theta)),
            "kc_diag": [float(kc[i, i]) for i in range(3)]})

    def plan(self):
        ms = self.hyps.map_shape
        shape = self.shape_lib[ms.shape_id]
        u_pose = Pose2.from_array(self.u)
        uT, z_tgt, self.plan_mode = select_target(
            shape, ms.theta_star, self.tool,
            "loosening" if self.loosening else "insertion",
            u_pose, self.sc.planner)
        if self.plan_mode == "probe" and ms.weight < 0.75 \
                and self.mode != "pure-impedance":
            # Uncertain oversize belief: press toward the believed center
            # for informative boundary contact instead of hovering.
            uT = z_tgt = Pose2(ms.theta_star.x, ms.theta_star.y, u_pose.phi)
            self.plan_mode = "probe-press"
        dmp = DmpParams.straight_line(u_pose, uT, tau=1.0)
        if self.mode != "pure-impedance":
            lam = default_exploration(dmp, self.sc.planner)
            try:
                dmp, info = mppi_plan(dmp, lam, ms.theta_star, shape,
                                      self.tool, self.params,
                                      self.sc.world.friction, z_tgt,
                                      self.rng_plan, self.sc.planner,
                                      self.sc.solver, z0=u_pose)
                self.hold_count = 0
                self.log.planner.append({
                    "t": round(self.t, 6), "mode": self.plan_mode,
                    "target": list(uT.as_array()),
                    "costs": [round(float(c), 4) for c in info["costs"]],
                    "elite": [int(i) for i in info["elite"]]})
            except AllInfeasible:
                self.hold_count += 1
                if self.hold_count >= 2:
                    self.hold_count = 0
                    self.plan_retreat(rotate=False)
                    return
                dmp = DmpParams.straight_line(u_pose, u_pose, tau=1.0)
                self.plan_mode = "hold"
                self.log.planner.append({"t": round(self.t, 6),
                                         "mode": self.plan_mode,
                                         "target": list(dmp.uT.as_array())})
        self.dmp = dmp
        self.dmp_v = np.zeros(3)
        self.dmp_t = 0.0
        self.horizon_left = self.sc.planner.horizon

    def plan_retreat(self, rotate: bool):
        """Back off along the tool axis (optionally turning) to regain a
        vantage the model can plan from and enrich the contact data."""
        u_pose = Pose2.from_array(self.u)
        back = np.array([math.cos(u_pose.phi), math.sin(u_pose.phi)]) * 0.012
        dphi = 0.0
        if rotate:
            dphi = self.sweep_sign * math.radians(30.0)
            self.sweep_sign = -self.sweep_sign
        tgt = Pose2(u_pose.x - back[0], u_pose.y - back[1], u_pose.phi + dphi)
        self.dmp = DmpParams.straight_line(u_pose, tgt, tau=1.0)
        self.plan_mode = "retreat"
        self.dmp_v = np.zeros(3)
        self.dmp_t = 0.0
        self.horizon_left = self.sc.planner.horizon
        self.log.planner.append({"t": round(self.t, 6), "mode": "retreat",
                                 "target": list(tgt.as_array())})

    # -- main loop ---------------------------------------------------------

    def control_step(self):
        """Command derivative at the current instant, then advance the
        command integrators (the world is stepped with the pre-advance u)."""
        ex = self.sc.executive
        dt = self.dt
        if self.phase in ("approach", "press"):
            u_dot = np.concatenate([self.d_appr * ex.approach_speed, [0.0]])
            u_next = self.u + u_dot * dt
        elif self.phase == "cycle" and self.dmp is not None:
            if self.horizon_left <= 0:
                # stop-and-sense: hold the command while the estimation
                # batch collects, so slip (and the friction force the
                # internal model excludes) decays to zero
                self.hold_left -= dt
                return np.zeros(3), self.u
            dp = self.dmp
            s_phase = math.exp(-4.0 * self.dmp_t / dp.tau)
            f = forcing_term(dp.beta, s_phase)[0]
            diff = dp.uT.as_array() - self.u
            diff[2] = wrap_angle(diff[2])
            u_dot = self.dmp_v / dp.tau
            dv = (dp.alpha1 * (dp.alpha2 * diff - self.dmp_v) + f) / dp.tau
            u_next = self.u + u_dot * dt
            self.dmp_v = self.dmp_v + dv * dt
            self.dmp_t += dt
            self.horizon_left -= dt
            if self.horizon_left <= 0:
                self.hold_left = self.sc.executive.hold_time
        else:
            u_dot = np.zeros(3)
            u_next = self.u
        return u_dot, u_next

    def on_observation(self):
        ex = self.sc.executive
        wrench_clean = self.world.contact_wrench(self.u)
        if self.sc.world.sigma_f > 0:
            fbar = wrench_clean + self.rng_noise.multivariate_normal(
                np.zeros(3), self.mm.Sigma)
        else:
            fbar = wrench_clean.copy()
        fmag = math.hypot(wrench_clean[0], wrench_clean[1])
        self.forces.append(fmag)
        fn = math.hypot(fbar[0], fbar[1])
        self.log.trace.append({"t": round(self.t, 6),
                               "u": [round(float(x), 9) for x in self.u],
                               "f": round(fmag, 6), "phase": self.phase,
                               "loosening": self.loosening})

        if self.phase == "approach":
            # Noise on a 0.2 N-sigma wrench clears 0.5 N a few percent of
            # the time; demand consecutive triggers before declaring contact.
            self.trigger_count = self.trigger_count + 1 \
                if fn > ex.contact_threshold else 0
            if self.trigger_count >= 3:
                self.phase = "press"
                self.press_until = self.t + ex.press_step / ex.approach_speed
        elif self.phase == "press":
            if self.t >= self.press_until:
                self.phase = "settle"
                self.settle_until = self.t + ex.settle_time
                self.settle_buf = []
        elif self.phase == "settle":
            self.settle_buf.append(fbar.copy())
            self.on_settled()
        elif self.phase == "cycle":
            self.on_cycle_tick(fbar, fmag)

    def on_settled(self):
        ex = self.sc.executive
        if self.t < self.settle_until:
            return
        # Average the tail of the settle window: the friction correction has
        # decayed and noise is suppressed, leaving a clean contact normal.
        tail = np.array(self.settle_buf[-10:])
        fbar = tail.mean(axis=0)
        fn = math.hypot(fbar[0], fbar[1])
        if fn <= ex.contact_threshold:
            self.phase = "press"
            self.press_until = self.t + ex.press_step / ex.approach_speed
            self.trigger_count = 0
            return
        zhat = self.observed_pose(fbar)
        try:
            self.hyps = init_hypotheses(Wrench2.from_array(fbar),
                                        Pose2.from_array(zhat),
                                        self.shape_lib, self.tool,
                                        self.params, self.sc.estimator)
        except NoFeasibleHypothesis:
            self.done = True
            return
        if self.mode == "pure-impedance":
            self.pin_to_true_shape()
        self.phase = "cycle"
        self.plan()
        self.jam_ref = (self.t, zhat.copy())

    def on_cycle_tick(self, fbar, fmag):
        ex = self.sc.executive
        zhat = self.observed_pose(fbar)
        holding = self.horizon_left <= 0
        if self.mode != "pure-impedance" and holding:
            bu, bw, bp = self.buffer
            bu.append(self.u.copy())
            bw.append(fbar.copy())
            bp.append(self.params)

        # watchdog: no net motion under sustained force means jamming.
        # The full loop treats a jam as a recovery event (back off, rotate,
        # re-plan); the blind baseline has no way to recover and fails.
        if self.t - self.jam_ref[0] >= ex.jam_window:
            moved = np.linalg.norm(zhat[:2] - self.jam_ref[1][:2]) \
                + 0.02 * abs(wrap_angle(zhat[2] - self.jam_ref[1][2]))
            if moved < ex.jam_progress and fmag > 2.0:
                if self.mode == "pure-impedance" or self.recovery_count >= 8:
                    self.jammed = True
                    self.done = True
                    return
                self.recovery_count += 1
                self.plan_retreat(rotate=True)
            self.jam_ref = (self.t, zhat.copy())

        ms = self.hyps.map_shape
        if self.loosening:
            turned = abs(wrap_angle(zhat[2] - self.loosen_start_phi))
            if turned >= self.sc.phases.loosen_total:
                self.done = True
                return
        elif ms.theta_star is not None and self.plan_mode in ("insert", "stage"):
            center = np.array([ms.theta_star.x, ms.theta_star.y])
            near = np.linalg.norm(zhat[:2] - center) < ex.engage_dist
            confident = (self.mode == "pure-impedance"
                         or ms.weight > ex.engage_weight)
            if near and confident and self.compatible(ms):
                self.engaged = True
                self.static_err = self.pose_error(ms)
                if self.sc.phases.loosening:
                    self.start_loosening(zhat)
                else:
                    self.done = True
                return
        if self.plan_mode == "probe" and self.mode != "pure-impedance" \
                and ms.weight > ex.finish_weight:
            if self.probe_stable >= 12:
                self.static_err = self.pose_error(ms)
                self.done = True
                return
        

        if holding and (self.hold_left <= 0 or self.mode == "pure-impedance"):
            if self.mode != "pure-impedance":
                self.flush_batches()
                self.update_stiffness(zhat)
                self.plan()
            else:
                self.horizon_left = self.sc.planner.horizon

    def start_loosening(self, zhat):
        self.flush_batches(final=True)
        self.n_batch = 5
        self.loosening = True
        self.loosen_start_phi = zhat[2]
        self.world.screw_free = True
        self.plan()

    def pin_to_true_shape(self):
        idx = list(self.sc.world.hypotheses).index(self.sc.world.true_shape)
        for k, s in enumerate(self.hyps.shapes):
            s.weight = 1.0 if k == idx else 0.0
            s.log_weight = 0.0 if k == idx else -700.0
        self.hyps.map_index = idx

    def run(self) -> TrialResult:
        n_steps = int(round(self.sc.executive.timeout / self.dt))
        travel_limit = np.linalg.norm(self.u[:2] - self.prior_center) + 0.015
        start_xy = self.u[:2].copy()
        for step in range(1, n_steps + 1):
            u_dot, u_next = self.control_step()
            self.world.step(self.u, u_dot, self.dt)
            self.u = u_next
            self.t = self.world.t
            if step % self.obs_every == 0:
                self.on_observation()
                if self.phase == "approach" and np.linalg.norm(
                        self.u[:2] - start_xy) > travel_limit:
                    self.done = True     # drove past the object: no contact
            if self.done:
                break
        else:
            self.timed_out = True
        return self.finish()

    def finish(self) -> TrialResult:
        sc = self.sc
        self.flush_batches(final=True)
        ms = self.hyps.map_shape if self.hyps is not None else None
        if ms is not None and not math.isfinite(self.static_err[0]):
            self.static_err = self.pose_error(ms)
        rot = abs(self.world.screw_rotation())
        manip_goal = (sc.phases.loosen_total - math.radians(5.0)
                      if sc.phases.loosening else None)
        manipulated = bool(self.engaged and (manip_goal is None
                                             or rot >= manip_goal))
        dyn_p = (float(np.mean([e[0] for e in self.loosen_errs]))
                 if self.loosen_errs else math.nan)
        dyn_a = (float(np.mean([e[1] for e in self.loosen_errs]))
                 if self.loosen_errs else math.nan)
        result = TrialResult(
            scenario=sc.name, seed=sc.seed, mode=self.mode,
            identified=bool(ms is not None and
                            self.labels[ms.shape_id] == sc.world.true_shape),
            manipulated=manipulated, engaged=self.engaged, jammed=self.jammed,
            timed_out=self.timed_out,
            map_shape="none" if ms is None else self.labels[ms.shape_id],
            true_shape=sc.world.true_shape,
            static_pos_err_mm=float(self.static_err[0]),
            static_ang_err_deg=float(self.static_err[1]),
            dynamic_pos_err_mm=dyn_p, dynamic_ang_err_deg=dyn_a,
            peak_force=float(max(self.forces)) if self.forces else 0.0,
            avg_force=float(np.mean(self.forces)) if self.forces else 0.0,
            task_time=round(self.t, 6), n_batches=self.batch_idx)
        self.log.result = asdict(result)
        return result


def run_closed_loop_trial(sc: Scenario, mode: str = "full",
                          log: TrialLog = None) -> TrialResult:
    """Run one trial; mode is full | fixed-stiffness | pure-impedance."""
    if mode not in ("full", "fixed-stiffness", "pure-impedance"):
        raise ValueError(f"unknown mode {mode!r}")
    return _Trial(sc, mode, log if log is not None else TrialLog()).run()


def run_ablation(sc: Scenario, mode: str, log: TrialLog = None) -> TrialResult:
    """Ablation entry point; modes as in run_closed_loop_trial."""
    return run_closed_loop_trial(sc, mode=mode, log=log)

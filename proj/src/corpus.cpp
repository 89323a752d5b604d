#include "mdm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

#include "mdm/error.hpp"
#include "mdm/hash.hpp"
#include "mdm/parallel.hpp"

namespace mdm {

const std::vector<std::string>& known_motion_families() {
  static const std::vector<std::string> families = {"walk", "wave",          "squat",         "turn",
                                                    "kick", "jump-in-place", "run-in-place", "raise-arms"};
  return families;
}

void CorpusConfig::validate() const {
  const auto& known = known_motion_families();
  if (families.size() < 4) throw ValidationError("families: at least 4 motion families are required");
  std::set<std::string> unique;
  for (const auto& f : families) {
    if (std::find(known.begin(), known.end(), f) == known.end()) {
      throw ValidationError("families: unknown motion family '" + f + "'");
    }
    if (!unique.insert(f).second) throw ValidationError("families: duplicate motion family '" + f + "'");
  }
  if (per_family < 16) throw ValidationError("per-family: must be at least 16");
  if (frames_min < 40 || frames_max > 120 || frames_min > frames_max) {
    throw ValidationError("frames: clip length range must satisfy 40 <= min <= max <= 120");
  }
  if (!(fps > 0)) throw ValidationError("fps: must be positive");
  if (!(walk_speed_min > 0) || walk_speed_min > walk_speed_max) {
    throw ValidationError("walk-speed: need 0 < min <= max");
  }
  if (!(test_fraction > 0 && test_fraction < 1)) throw ValidationError("test-fraction: must lie in (0, 1)");
  if (!(contacts.velocity > 0) || !(contacts.height > 0)) throw ValidationError("contact thresholds must be positive");
}

nlohmann::json CorpusConfig::to_json() const {
  return {{"families", families},
          {"per_family", per_family},
          {"frames_min", frames_min},
          {"frames_max", frames_max},
          {"fps", fps},
          {"walk_speed_min", walk_speed_min},
          {"walk_speed_max", walk_speed_max},
          {"test_fraction", test_fraction},
          {"contact_velocity", contacts.velocity},
          {"contact_height", contacts.height}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.families = j.value("families", c.families);
  c.per_family = j.value("per_family", c.per_family);
  c.frames_min = j.value("frames_min", c.frames_min);
  c.frames_max = j.value("frames_max", c.frames_max);
  c.fps = j.value("fps", c.fps);
  c.walk_speed_min = j.value("walk_speed_min", c.walk_speed_min);
  c.walk_speed_max = j.value("walk_speed_max", c.walk_speed_max);
  c.test_fraction = j.value("test_fraction", c.test_fraction);
  c.contacts.velocity = j.value("contact_velocity", c.contacts.velocity);
  c.contacts.height = j.value("contact_height", c.contacts.height);
  return c;
}

namespace {

constexpr double kPi = std::numbers::pi;

Quat axis_angle(double angle, const Vec3& axis) { return Quat(Eigen::AngleAxisd(angle, axis)); }
// Swings a downward-pointing limb forward (+z).
Quat flex(double a) { return axis_angle(-a, Vec3::UnitX()); }
// Folds the lower segment backward relative to the upper one.
Quat bend(double a) { return axis_angle(a, Vec3::UnitX()); }
// Lifts a downward-pointing limb outward; side = +1 left (+x), -1 right.
Quat abduct(double a, int side) { return axis_angle(side * a, Vec3::UnitZ()); }
Quat lean(double a) { return axis_angle(a, Vec3::UnitX()); }
Quat yaw(double a) { return axis_angle(a, Vec3::UnitY()); }
Quat twist(double a) { return axis_angle(a, Vec3::UnitY()); }

double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3 - 2 * x);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  bool coin() { return integer(0, 1) == 1; }
  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<std::size_t>(integer(0, static_cast<int>(v.size()) - 1))];
  }

 private:
  std::mt19937_64 engine_;
};

// Joint indices of the desk skeleton, resolved by name.
struct Rig {
  int pelvis, l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle, spine, chest, neck, head;
  int l_shoulder, l_elbow, l_wrist, r_shoulder, r_elbow, r_wrist;
  double thigh, shin, hip_drop, standing_height;

  explicit Rig(const Skeleton& s)
      : pelvis(0),
        l_hip(s.joint_index("left_hip")),
        l_knee(s.joint_index("left_knee")),
        l_ankle(s.joint_index("left_ankle")),
        r_hip(s.joint_index("right_hip")),
        r_knee(s.joint_index("right_knee")),
        r_ankle(s.joint_index("right_ankle")),
        spine(s.joint_index("spine")),
        chest(s.joint_index("chest")),
        neck(s.joint_index("neck")),
        head(s.joint_index("head")),
        l_shoulder(s.joint_index("left_shoulder")),
        l_elbow(s.joint_index("left_elbow")),
        l_wrist(s.joint_index("left_wrist")),
        r_shoulder(s.joint_index("right_shoulder")),
        r_elbow(s.joint_index("right_elbow")),
        r_wrist(s.joint_index("right_wrist")),
        thigh(s.offset(l_knee).norm()),
        shin(s.offset(l_ankle).norm()),
        hip_drop(-s.offset(l_hip).y()),
        standing_height(s.rest_root_height() + s.ground_height()) {}
};

// Hip flexion and knee bend that keep the ankle directly below the hip at
// vertical distance d (planted-leg IK for a two-segment leg).
std::pair<double, double> planted_leg(double thigh, double shin, double d) {
  const double reach = thigh + shin;
  if (d >= reach) return {0.0, 0.0};
  const auto ankle_height = [&](double alpha) {
    const double s = std::min(1.0, thigh / shin * std::sin(alpha));
    return thigh * std::cos(alpha) + shin * std::sqrt(1 - s * s);
  };
  const double max_alpha = thigh > shin ? std::asin(shin / thigh) : kPi / 2;
  double lo = 0, hi = max_alpha;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (ankle_height(mid) > d ? lo : hi) = mid;
  }
  const double alpha = 0.5 * (lo + hi);
  const double beta = std::asin(std::min(1.0, thigh / shin * std::sin(alpha)));
  return {alpha, alpha + beta};
}

struct Frame {
  Vec3 root;
  std::vector<Quat> local;
};

class ClipBuilder {
 public:
  ClipBuilder(const Skeleton& s, int frames, double fps)
      : rig(s), joints_(s.num_joints()), frames_(frames), fps_(fps) {}

  const Rig rig;

  double time(int f) const { return f / fps_; }

  Frame rest(const Vec3& root) const {
    Frame fr{root, std::vector<Quat>(static_cast<std::size_t>(joints_), Quat::Identity())};
    fr.local[rig.l_shoulder] = abduct(0.08, +1);
    fr.local[rig.r_shoulder] = abduct(0.08, -1);
    return fr;
  }

  // Both legs planted with the pelvis at the given height.
  void plant_legs(Frame& fr, double root_height) const {
    const double d = root_height - rig.hip_drop;
    const auto [hip, knee] = planted_leg(rig.thigh, rig.shin, d);
    fr.local[rig.l_hip] = flex(hip);
    fr.local[rig.r_hip] = flex(hip);
    fr.local[rig.l_knee] = bend(knee);
    fr.local[rig.r_knee] = bend(knee);
  }

  int frames() const { return frames_; }

 private:
  int joints_;
  int frames_;
  double fps_;
};

struct Texture {
  double sway_amp, sway_freq, sway_phase, nod_amp, nod_phase;
  explicit Texture(Rng& rng)
      : sway_amp(rng.uniform(0.0, 0.06)),
        sway_freq(rng.uniform(0.2, 0.6)),
        sway_phase(rng.uniform(0, 2 * kPi)),
        nod_amp(rng.uniform(0.0, 0.08)),
        nod_phase(rng.uniform(0, 2 * kPi)) {}

  void apply(Frame& fr, const Rig& rig, double t) const {
    fr.local[rig.spine] = fr.local[rig.spine] * twist(sway_amp * std::sin(2 * kPi * sway_freq * t + sway_phase));
    fr.local[rig.neck] = fr.local[rig.neck] * lean(nod_amp * std::sin(2 * kPi * sway_freq * t + nod_phase));
  }
};

std::string side_name(int side) { return side > 0 ? "left" : "right"; }

}  // namespace

GeneratedClip generate_clip(const Skeleton& skeleton, const std::string& family, int frames, double fps,
                            const CorpusConfig& config, std::uint64_t clip_seed) {
  Rng rng(clip_seed);
  ClipBuilder b(skeleton, frames, fps);
  const Rig& rig = b.rig;
  const double H0 = rig.standing_height;
  const double heading = rng.uniform(0, 2 * kPi);
  const Vec3 start(rng.uniform(-0.5, 0.5), 0.0, rng.uniform(-0.5, 0.5));
  const Texture texture(rng);

  GeneratedClip clip;
  std::vector<Frame> seq;
  seq.reserve(static_cast<std::size_t>(frames));
  Quat root_rot_base = yaw(heading);
  std::vector<Quat> root_rot(static_cast<std::size_t>(frames), root_rot_base);

  if (family == "walk") {
    const double speed = rng.uniform(config.walk_speed_min, config.walk_speed_max);
    const double stride_hz = 0.6 + 0.5 * speed;
    const double amp = 0.25 + 0.12 * speed;
    const double knee_amp = rng.uniform(0.5, 0.9);
    const double phase = rng.uniform(0, 2 * kPi);
    const Vec3 dir = root_rot_base * Vec3::UnitZ();
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double ph = 2 * kPi * stride_hz * t + phase;
      const double s = std::sin(ph);
      const double stance_angle = amp * std::abs(s);
      Vec3 root = start + dir * (speed * t);
      root.y() = rig.hip_drop + (rig.thigh + rig.shin) * std::cos(stance_angle) + skeleton.ground_height();
      Frame fr = b.rest(root);
      fr.local[rig.l_hip] = flex(amp * s);
      fr.local[rig.r_hip] = flex(-amp * s);
      fr.local[rig.l_knee] = bend(knee_amp * std::max(0.0, std::cos(ph)));
      fr.local[rig.r_knee] = bend(knee_amp * std::max(0.0, -std::cos(ph)));
      fr.local[rig.l_shoulder] = flex(-0.7 * amp * s) * abduct(0.08, +1);
      fr.local[rig.r_shoulder] = flex(0.7 * amp * s) * abduct(0.08, -1);
      fr.local[rig.l_elbow] = flex(0.25 + 0.1 * s);
      fr.local[rig.r_elbow] = flex(0.25 - 0.1 * s);
      seq.push_back(std::move(fr));
    }
    clip.horizontal_speed = speed;
    const double third = (config.walk_speed_max - config.walk_speed_min) / 3.0;
    const std::string pace = speed < config.walk_speed_min + third   ? "slowly"
                             : speed < config.walk_speed_max - third ? "at a steady pace"
                                                                     : "briskly";
    clip.captions = {"a person walks " + rng.pick(std::vector<std::string>{"forward", "ahead", "straight ahead"}),
                     "someone walks " + pace, "a person is walking " + pace,
                     "a figure takes a " + rng.pick(std::vector<std::string>{"short", "calm", "casual"}) + " walk"};
  } else if (family == "wave") {
    const int side = rng.coin() ? +1 : -1;
    const double freq = rng.uniform(1.0, 2.0);
    const double amp = rng.uniform(0.35, 0.7);
    const double raise = rng.uniform(2.2, 2.8);
    const double phase = rng.uniform(0, 2 * kPi);
    const double ramp = rng.uniform(0.3, 0.6);
    const int sho = side > 0 ? rig.l_shoulder : rig.r_shoulder;
    const int elb = side > 0 ? rig.l_elbow : rig.r_elbow;
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double up = smoothstep(t / ramp);
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      fr.local[sho] = abduct(0.08 + up * raise, side);
      fr.local[elb] = abduct(up * (amp * std::sin(2 * kPi * freq * t + phase) - 0.4), side);
      seq.push_back(std::move(fr));
    }
    const std::string hand = side_name(side);
    clip.captions = {"a person waves with the " + hand + " hand",
                     "someone raises their " + hand + " arm and waves",
                     "a person waving " + rng.pick(std::vector<std::string>{"hello", "goodbye", "at a friend"}),
                     "a figure waves " + std::string(freq > 1.5 ? "quickly" : "slowly") + " with one hand"};
  } else if (family == "squat") {
    const double depth = rng.uniform(0.15, 0.40);
    const double period = rng.uniform(1.5, 3.0);
    const double arm_gain = rng.uniform(1.0, 1.6);
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double g = 0.5 * (1 - std::cos(2 * kPi * t / period));
      const double h = H0 - depth * g;
      Frame fr = b.rest(start + Vec3(0, h, 0));
      b.plant_legs(fr, h - skeleton.ground_height());
      fr.local[rig.spine] = lean(0.35 * g);
      fr.local[rig.l_shoulder] = flex(arm_gain * g) * abduct(0.08, +1);
      fr.local[rig.r_shoulder] = flex(arm_gain * g) * abduct(0.08, -1);
      seq.push_back(std::move(fr));
    }
    clip.captions = {"a person squats down and stands up",
                     "someone does " + std::string(depth > 0.28 ? "deep" : "shallow") + " squats",
                     "a person bends their knees into a squat",
                     "a figure " + rng.pick(std::vector<std::string>{"crouches", "squats", "dips"}) + " down and rises again"};
  } else if (family == "turn") {
    const int dir = rng.coin() ? +1 : -1;
    const double rate = rng.uniform(40.0, 90.0) * kPi / 180.0;
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      root_rot[f] = yaw(heading + dir * rate * t);
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      fr.local[rig.head] = twist(dir * 0.2);
      fr.local[rig.l_shoulder] = abduct(0.08 + 0.15 * std::sin(kPi * t), +1);
      fr.local[rig.r_shoulder] = abduct(0.08 + 0.15 * std::sin(kPi * t), -1);
      seq.push_back(std::move(fr));
    }
    const std::string way = dir > 0 ? "left" : "right";
    clip.captions = {"a person turns " + way + " in place",
                     "someone spins around " + std::string(rate > 65 * kPi / 180 ? "quickly" : "slowly"),
                     "a person rotates their body to the " + way,
                     "a figure " + rng.pick(std::vector<std::string>{"pivots", "turns", "rotates"}) + " on the spot"};
  } else if (family == "kick") {
    const int side = rng.coin() ? +1 : -1;
    const double period = rng.uniform(1.2, 2.0);
    const double amp = rng.uniform(0.9, 1.4);
    const double knee_amp = rng.uniform(0.6, 1.0);
    const int hip = side > 0 ? rig.l_hip : rig.r_hip;
    const int knee = side > 0 ? rig.l_knee : rig.r_knee;
    const int arm = side > 0 ? rig.r_shoulder : rig.l_shoulder;
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double s = std::sin(2 * kPi * t / period);
      const double g = std::max(0.0, s) * std::max(0.0, s);
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      fr.local[hip] = flex(amp * g);
      fr.local[knee] = bend(knee_amp * std::max(0.0, s) * (1 - g) * 2);
      fr.local[arm] = flex(0.5 * g) * abduct(0.08, side > 0 ? -1 : +1);
      fr.local[rig.spine] = lean(-0.15 * g);
      seq.push_back(std::move(fr));
    }
    const std::string leg = side_name(side);
    clip.captions = {"a person kicks with the " + leg + " leg",
                     "someone kicks forward " + rng.pick(std::vector<std::string>{"hard", "repeatedly", "high"}),
                     "a person does a " + leg + " kick",
                     "a figure swings the " + leg + " foot in a kick"};
  } else if (family == "jump-in-place") {
    const double period = rng.uniform(0.9, 1.4);
    const double height = rng.uniform(0.12, 0.35);
    const double crouch = rng.uniform(0.10, 0.20);
    const double offset = rng.uniform(0, period);
    constexpr double kCrouch = 0.3, kFlight = 0.35;
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double u = std::fmod(t + offset, period) / period;
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      if (u < kCrouch) {
        const double h = H0 - crouch * std::sin(kPi * u / kCrouch);
        fr.root.y() = h;
        b.plant_legs(fr, h - skeleton.ground_height());
        fr.local[rig.l_shoulder] = flex(-0.4 * std::sin(kPi * u / kCrouch)) * abduct(0.08, +1);
        fr.local[rig.r_shoulder] = flex(-0.4 * std::sin(kPi * u / kCrouch)) * abduct(0.08, -1);
      } else if (u < kCrouch + kFlight) {
        const double s = (u - kCrouch) / kFlight;
        fr.root.y() = H0 + height * 4 * s * (1 - s);
        const double tuck = std::sin(kPi * s);
        fr.local[rig.l_hip] = flex(0.2 * tuck);
        fr.local[rig.r_hip] = flex(0.2 * tuck);
        fr.local[rig.l_knee] = bend(0.4 * tuck);
        fr.local[rig.r_knee] = bend(0.4 * tuck);
        fr.local[rig.l_shoulder] = flex(1.4 * tuck) * abduct(0.08, +1);
        fr.local[rig.r_shoulder] = flex(1.4 * tuck) * abduct(0.08, -1);
      }
      seq.push_back(std::move(fr));
    }
    clip.captions = {"a person jumps in place", "someone jumps up and down",
                     "a person hops " + std::string(height > 0.24 ? "high" : "lightly") + " on the spot",
                     "a figure " + rng.pick(std::vector<std::string>{"leaps", "jumps", "bounces"}) + " straight up"};
  } else if (family == "run-in-place") {
    const double cadence = rng.uniform(1.2, 1.8);
    const double lift = rng.uniform(0.7, 1.2);
    const double phase = rng.uniform(0, 2 * kPi);
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double s = std::sin(2 * kPi * cadence * t + phase);
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      fr.local[rig.l_hip] = flex(lift * std::max(0.0, s));
      fr.local[rig.l_knee] = bend(1.6 * lift * std::max(0.0, s));
      fr.local[rig.r_hip] = flex(lift * std::max(0.0, -s));
      fr.local[rig.r_knee] = bend(1.6 * lift * std::max(0.0, -s));
      fr.local[rig.l_shoulder] = flex(-0.6 * s) * abduct(0.08, +1);
      fr.local[rig.r_shoulder] = flex(0.6 * s) * abduct(0.08, -1);
      fr.local[rig.l_elbow] = flex(1.4);
      fr.local[rig.r_elbow] = flex(1.4);
      seq.push_back(std::move(fr));
    }
    clip.captions = {"a person runs in place", "someone jogs on the spot",
                     "a person lifts their knees running in place",
                     "a figure " + rng.pick(std::vector<std::string>{"jogs", "runs", "sprints"}) + " without moving forward"};
  } else if (family == "raise-arms") {
    const bool sideways = rng.coin();
    const double amp = rng.uniform(1.4, 3.0);
    const double period = rng.uniform(1.5, 3.0);
    for (int f = 0; f < frames; ++f) {
      const double t = b.time(f);
      const double th = amp * 0.5 * (1 - std::cos(2 * kPi * t / period));
      Frame fr = b.rest(start + Vec3(0, H0, 0));
      if (sideways) {
        fr.local[rig.l_shoulder] = abduct(0.08 + th, +1);
        fr.local[rig.r_shoulder] = abduct(0.08 + th, -1);
      } else {
        fr.local[rig.l_shoulder] = flex(th) * abduct(0.08, +1);
        fr.local[rig.r_shoulder] = flex(th) * abduct(0.08, -1);
      }
      seq.push_back(std::move(fr));
    }
    const std::string where = sideways ? "to the sides" : "forward";
    clip.captions = {"a person raises both arms " + where, "someone lifts their arms up and down",
                     "a person stretches both arms " + std::string(amp > 2.4 ? "overhead" : where),
                     "a figure " + rng.pick(std::vector<std::string>{"lifts", "raises", "swings"}) + " both arms " + where};
  } else {
    throw ValidationError("families: unknown motion family '" + family + "'");
  }

  const int J = skeleton.num_joints();
  clip.pose = PoseRotations(frames, J);
  for (int f = 0; f < frames; ++f) {
    Frame& fr = seq[static_cast<std::size_t>(f)];
    texture.apply(fr, rig, b.time(f));
    clip.pose.root_translation[f] = fr.root;
    clip.pose.at(f, 0) = (root_rot[f] * fr.local[0]).normalized();
    for (int j = 1; j < J; ++j) clip.pose.at(f, j) = fr.local[j].normalized();
  }
  const JointPositions positions = forward_kinematics(skeleton, clip.pose);
  clip.contacts = detect_foot_contacts(positions, skeleton, config.contacts);
  clip.motion = features_from_kinematics(skeleton, clip.pose, clip.contacts, fps);
  return clip;
}

LabeledDataset generate_procedural_corpus(const CorpusConfig& config, std::uint64_t seed) {
  config.validate();
  LabeledDataset ds;
  ds.skeleton = Skeleton::desk_default();
  ds.layout = FeatureLayout(ds.skeleton);
  ds.fps = config.fps;
  ds.class_names = config.families;

  const std::size_t total = config.families.size() * static_cast<std::size_t>(config.per_family);
  ds.motions.resize(total);
  ds.labels.resize(total);
  parallel_for(total, [&](std::size_t i) {
    const std::uint64_t clip_seed = split_seed(seed, i);
    const int family = static_cast<int>(i / static_cast<std::size_t>(config.per_family));
    Rng length_rng(split_seed(clip_seed, 0));
    const int frames = length_rng.integer(config.frames_min, config.frames_max);
    GeneratedClip clip = generate_clip(ds.skeleton, config.families[family], frames, config.fps, config, clip_seed);
    ds.motions[i] = std::move(clip.motion);
    ds.labels[i] = ClipLabel{family, config.families[family], std::move(clip.captions)};
  });

  // Stratified split: the same fraction of every family goes to test.
  std::mt19937_64 split_rng(split_seed(seed, total + 1));
  const int n_test = std::max(1, static_cast<int>(std::ceil(config.test_fraction * config.per_family)));
  for (std::size_t fam = 0; fam < config.families.size(); ++fam) {
    std::vector<int> idx(static_cast<std::size_t>(config.per_family));
    for (int k = 0; k < config.per_family; ++k) idx[k] = static_cast<int>(fam) * config.per_family + k;
    std::shuffle(idx.begin(), idx.end(), split_rng);
    ds.test.insert(ds.test.end(), idx.begin(), idx.begin() + n_test);
    ds.train.insert(ds.train.end(), idx.begin() + n_test, idx.end());
  }
  std::sort(ds.train.begin(), ds.train.end());
  std::sort(ds.test.begin(), ds.test.end());
  ds.stats = DatasetStats::compute(ds.motions, ds.train);
  ds.validate();
  return ds;
}

}  // namespace mdm

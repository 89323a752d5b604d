#include "mdm/cli.hpp"

#include <torch/torch.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <sstream>

#include "mdm/checkpoint.hpp"
#include "mdm/corpus.hpp"
#include "mdm/editing.hpp"
#include "mdm/error.hpp"
#include "mdm/evaluation.hpp"
#include "mdm/hash.hpp"
#include "mdm/motion_io.hpp"
#include "mdm/parallel.hpp"
#include "mdm/render.hpp"
#include "mdm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mdm {

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string numbered(const std::string& stem, int i, const std::string& ext) {
  std::ostringstream os;
  os << stem << "_" << std::setw(3) << std::setfill('0') << i << ext;
  return os.str();
}

// Config file values become ordinary flags placed before the user's; keys the
// user also passes are dropped so the command line wins.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  if (args.empty()) return args;
  std::vector<std::string> rest;
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      config_path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out{args[0]};
  if (!config_path.empty()) {
    json j;
    try {
      j = json::parse(read_text_file(config_path));
    } catch (const std::exception& e) {
      throw ValidationError("--config: " + std::string(e.what()));
    }
    if (!j.is_object()) throw ValidationError("--config: expected a JSON object");
    if (j.contains(args[0]) && j[args[0]].is_object()) j = j[args[0]];
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) continue;  // settings for another subcommand
      const std::string flag = "--" + key;
      const bool overridden = std::any_of(rest.begin(), rest.end(), [&](const std::string& a) {
        return a == flag || a.rfind(flag + "=", 0) == 0;
      });
      if (overridden) continue;
      if (value.is_boolean()) {
        if (value.get<bool>()) out.push_back(flag);
      } else if (value.is_array()) {
        std::string joined;
        for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
        out.push_back(flag);
        out.push_back(joined);
      } else {
        out.push_back(flag);
        out.push_back(value.is_string() ? value.get<std::string>() : value.dump());
      }
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

json option_values(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name == "config") continue;
    if (o->count() > 0) {
      const auto& r = o->results();
      j[name] = o->get_expected_max() > 1 ? json(r) : json(r.back());
    } else if (!o->get_default_str().empty()) {
      j[name] = o->get_default_str();
    }
  }
  return j;
}

struct Run {
  std::string command;
  std::vector<std::string> args;  // resolved: config expanded, no --config
  json config;
  std::string started;
  int threads = 1;
  std::ostream& out;
  std::ostream& err;
};

void write_manifest(const fs::path& dir, const Run& run, const json& extra) {
  json m = {{"tool_version", kToolVersion},
            {"command", run.command},
            {"args", run.args},
            {"config", run.config},
            {"threads", run.threads},
            {"started", run.started},
            {"finished", utc_now()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  fs::create_directories(dir);
  write_text_file(dir / "manifest.json", m.dump(2) + "\n");
}

std::shared_ptr<const TextEmbedder> load_text_embedder(const std::string& path) {
  if (path.empty()) return nullptr;
  return PrecomputedTextEmbedder::load(path);
}

Condition parse_condition(const std::string& text, const std::string& action, const LoadedCheckpoint& ck) {
  if (!text.empty() && !action.empty()) throw ValidationError("--text and --action are mutually exclusive");
  const auto mode = ck.config.condition_mode;
  if (!text.empty()) {
    if (mode != ConditionMode::Text) throw ValidationError("--text: checkpoint is " + to_string(mode) + "-conditioned");
    return Condition::text(text);
  }
  if (!action.empty()) {
    if (mode != ConditionMode::Action)
      throw ValidationError("--action: checkpoint is " + to_string(mode) + "-conditioned");
    const auto& names = ck.meta.class_names;
    const auto it = std::find(names.begin(), names.end(), action);
    if (it != names.end()) return Condition::action(static_cast<int>(it - names.begin()));
    try {
      std::size_t used = 0;
      const int id = std::stoi(action, &used);
      if (used == action.size() && id >= 0 && id < static_cast<int>(names.size())) return Condition::action(id);
    } catch (const std::exception&) {
    }
    std::string known;
    for (const auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw ValidationError("--action: unknown class '" + action + "' (" + known + ")");
  }
  return Condition::null();
}

void write_outputs(const fs::path& dir, const std::vector<MotionSequence>& motions, const Skeleton& skeleton,
                   const std::vector<json>& meta, const std::string& render, const RenderStyle& style) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < motions.size(); ++i) {
    MotionFile mf;
    mf.motion = motions[i];
    mf.skeleton = skeleton;
    mf.meta = meta[i];
    write_motion_file(dir / numbered("sample", static_cast<int>(i), ".motion"), mf);
    if (!render.empty()) {
      const auto fmt = render_format_from_string(render);
      const std::string ext = fmt == RenderFormat::Png ? "" : "." + render;
      render_motion(motions[i], skeleton, fmt, style, dir / numbered("sample", static_cast<int>(i), ext));
    }
  }
}

// Rethrows corpus validation errors with the offending flag's name.
[[noreturn]] void rethrow_as_flag(const ValidationError& e) {
  std::string msg = e.what();
  const auto colon = msg.find(':');
  if (colon == std::string::npos) throw e;
  std::string field = msg.substr(0, colon);
  std::replace(field.begin(), field.end(), '_', '-');
  if (field == "frames") field = "frames-min/--frames-max";
  throw ValidationError("--" + field + msg.substr(colon));
}

// ---- commands ----

struct GenCorpusOpts {
  std::vector<std::string> families = known_motion_families();
  int per_family = 64;
  int frames_min = 40, frames_max = 60;
  double fps = 20.0, test_fraction = 0.2;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_gen_corpus(const GenCorpusOpts& o, const Run& run) {
  CorpusConfig cc;
  cc.families = o.families;
  cc.per_family = o.per_family;
  cc.frames_min = o.frames_min;
  cc.frames_max = o.frames_max;
  cc.fps = o.fps;
  cc.test_fraction = o.test_fraction;
  try {
    cc.validate();
  } catch (const ValidationError& e) {
    rethrow_as_flag(e);
  }
  const auto ds = generate_procedural_corpus(cc, o.seed);
  save_dataset(o.out, ds, {{"generator", cc.to_json()}, {"seed", o.seed}});
  const auto hash = dataset_hash(o.out);
  write_manifest(o.out, run, {{"corpus_hash", hash}, {"seeds", {{"corpus", o.seed}}}});
  run.out << "wrote " << ds.size() << " clips (" << ds.train.size() << " train, " << ds.test.size() << " test) to "
          << o.out << "\ncorpus hash " << hash << "\n";
  return 0;
}

struct TrainOpts {
  std::string data, out, cond = "text", arch = "encoder", text_embeddings, resume, evaluator;
  int latent = 128, layers = 4, heads = 4, ff = 256, max_frames = 120, diffusion_steps = 1000;
  double dropout = 0.1;
  int steps = 20000, batch = 32, log_interval = 100, eval_interval = 0, checkpoint_interval = 0, eval_samples = 8;
  double lr = 1e-4, cfg_prob = 0.1, lambda_pos = 0, lambda_vel = 0, lambda_foot = 0, clip_norm = 1.0;
  bool positions_only = false;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainOpts& o, const Run& run) {
  const auto ds = load_dataset(o.data);
  const auto corpus_hash = dataset_hash(o.data);
  const auto text = load_text_embedder(o.text_embeddings);

  DenoiserConfig dc;
  dc.latent_dim = o.latent;
  dc.num_layers = o.layers;
  dc.num_heads = o.heads;
  dc.ff_dim = o.ff;
  dc.dropout = o.dropout;
  dc.max_frames = o.max_frames;
  dc.feature_dim = ds.layout.dim();
  dc.diffusion_steps = o.diffusion_steps;
  dc.backbone = backbone_from_string(o.arch);
  dc.condition_mode = condition_mode_from_string(o.cond);
  dc.num_classes = dc.condition_mode == ConditionMode::Action ? ds.num_classes() : 0;
  if (text) {
    dc.text_encoder = TextEncoderKind::External;
    dc.text_dim = text->dim();
  }
  dc.init_seed = o.seed;
  dc.validate();
  for (const auto& m : ds.motions)
    if (m.frames() > dc.max_frames)
      throw ValidationError("--max-frames: corpus has a clip with " + std::to_string(m.frames()) + " frames");

  TrainConfig tc;
  tc.batch_size = o.batch;
  tc.learning_rate = o.lr;
  tc.total_steps = o.steps;
  tc.cfg_mask_prob = dc.condition_mode == ConditionMode::Unconditional ? 0.0 : o.cfg_prob;
  tc.seed = o.seed;
  tc.eval_interval = o.eval_interval;
  tc.checkpoint_interval = o.checkpoint_interval;
  tc.log_interval = o.log_interval;
  tc.loss_weights = {o.lambda_pos, o.lambda_vel, o.lambda_foot};
  tc.positions_only = o.positions_only;
  tc.clip_norm = o.clip_norm;
  tc.validate();

  MotionDenoiser model = make_denoiser(dc, text);
  std::optional<AdamState> resume_state;
  TrainOptions opts;
  opts.out_dir = o.out;
  opts.corpus_hash = corpus_hash;
  if (!o.resume.empty()) {
    auto ck = load_checkpoint(o.resume, text, &dc);
    if (!ck.optimizer) throw ValidationError("--resume: checkpoint carries no optimizer state");
    model = ck.model;
    resume_state = ck.optimizer;
    opts.resume_optimizer = &*resume_state;
    opts.start_step = static_cast<int>(ck.meta.step);
  }
  const auto schedule = make_cosine_schedule(dc.diffusion_steps);

  std::optional<Evaluators> evaluators;
  if (o.eval_interval > 0) {
    const fs::path cache = o.evaluator.empty() ? fs::path(o.out) / "evaluators.ckpt" : fs::path(o.evaluator);
    evaluators = load_or_train_evaluators(cache, ds, corpus_hash, EvaluatorConfig{});
    opts.evaluate = [&](MotionDenoiser& m, int step) {
      const DenoiserX0Model x0(m);
      EvalConfig ec;
      ec.reps = 1;
      ec.seed = o.seed;
      ec.samples_per_class = o.eval_samples;
      ec.max_prompts = o.eval_samples * std::max(1, ds.num_classes());
      ec.unconditional_samples = std::max(2, o.eval_samples * ds.num_classes());
      ec.mm_prompts = 0;
      const auto r = evaluate(x0, dc.condition_mode, ds, ds.stats, *evaluators, schedule, ec);
      const double f = r.metrics.at("fid").value;
      run.out << "eval step " << step << " fid " << f << "\n";
      return f;
    };
  }
  opts.on_log = [&](const TrainLogEntry& e) {
    run.out << "step " << e.step << "/" << o.steps << " loss " << e.total << " (simple " << e.loss_simple << ") "
            << std::fixed << std::setprecision(1) << e.wall_time << "s" << std::defaultfloat << std::setprecision(6)
            << "\n";
  };
  const auto result = train(model, ds, schedule, tc, opts);
  json extra = {{"corpus_hash", corpus_hash},
                {"seeds", {{"train", o.seed}, {"init", dc.init_seed}}},
                {"model_config", dc.to_json()},
                {"train_seconds", result.wall_seconds},
                {"checkpoint_hash", hash_file(fs::path(o.out) / "last.ckpt")}};
  if (result.best_metric) extra["best"] = {{"metric", *result.best_metric}, {"step", result.best_step}};
  write_manifest(o.out, run, extra);
  run.out << "trained " << result.steps << " steps in " << result.wall_seconds << " s -> " << o.out << "\n";
  return 0;
}

struct RenderOpts {
  std::string format = "gif", view = "front";
  int trail = 4, width = 320, height = 320;
  bool positions = false;

  RenderStyle style() const {
    RenderStyle s;
    s.view = view;
    s.trail = trail;
    s.width = width;
    s.height = height;
    s.from_rotations = !positions;
    s.validate();
    return s;
  }
};

struct SampleOpts {
  std::string ckpt, text, action, out, render, text_embeddings;
  int n = 1, frames = 60;
  double scale = 2.5;
  std::uint64_t seed = 0;
  RenderOpts style;
};

int cmd_sample(const SampleOpts& o, const Run& run) {
  const auto ck = load_checkpoint(o.ckpt, load_text_embedder(o.text_embeddings));
  if (o.n < 1) throw ValidationError("--n must be >= 1");
  const auto condition = parse_condition(o.text, o.action, ck);
  const DenoiserX0Model model(ck.model);
  const auto schedule = make_cosine_schedule(ck.config.diffusion_steps);
  const std::vector<Condition> conds(static_cast<std::size_t>(o.n), condition);
  auto motions = sample(model, conds, o.frames, o.scale, schedule, ck.meta.stats, o.seed);
  const auto ckpt_hash = hash_file(o.ckpt);
  std::vector<json> meta;
  for (int i = 0; i < o.n; ++i) {
    motions[i].fps = ck.meta.fps;
    meta.push_back({{"condition", condition.describe()}, {"scale", o.scale}, {"seed", o.seed}, {"index", i},
                    {"checkpoint_hash", ckpt_hash}});
  }
  write_outputs(o.out, motions, ck.meta.skeleton, meta, o.render, o.style.style());
  write_manifest(o.out, run, {{"checkpoint_hash", ckpt_hash}, {"corpus_hash", ck.meta.corpus_hash}, {"seeds", {{"sample", o.seed}}}});
  run.out << "wrote " << o.n << " motions (" << condition.describe() << ", s = " << o.scale << ") to " << o.out << "\n";
  return 0;
}

struct EditOpts {
  std::string ckpt, ref, preset, mask, text, action, out, render, text_embeddings;
  int n = 1;
  double scale = 2.5;
  std::uint64_t seed = 0;
  RenderOpts style;
};

int cmd_edit(const EditOpts& o, const Run& run) {
  const auto ck = load_checkpoint(o.ckpt, load_text_embedder(o.text_embeddings));
  if (o.n < 1) throw ValidationError("--n must be >= 1");
  if (o.preset.empty() == o.mask.empty()) throw ValidationError("--preset or --mask: give exactly one");
  const auto ref = read_motion_file(o.ref);
  if (!(ref.skeleton == ck.meta.skeleton)) throw ValidationError("--ref: skeleton differs from the checkpoint's");
  json spec;
  if (!o.preset.empty()) {
    spec = {{"preset", o.preset}};
  } else {
    try {
      spec = json::parse(read_text_file(o.mask));
    } catch (const json::exception& e) {
      throw ValidationError("--mask: " + std::string(e.what()));
    }
  }
  const EditSpec edit_spec{ref.motion, mask_from_json(spec, ref.motion.frames(), ck.meta.skeleton, ck.meta.layout)};
  const auto condition = parse_condition(o.text, o.action, ck);
  const DenoiserX0Model model(ck.model);
  const auto schedule = make_cosine_schedule(ck.config.diffusion_steps);
  const auto ckpt_hash = hash_file(o.ckpt);
  std::vector<MotionSequence> motions;
  std::vector<json> meta;
  double worst = 0.0;
  for (int i = 0; i < o.n; ++i) {
    const auto seed = split_seed(o.seed, static_cast<std::uint64_t>(i));
    motions.push_back(edit(model, schedule, edit_spec, condition, o.scale, ck.meta.stats, seed));
    const double e = observed_max_error(motions.back(), edit_spec);
    worst = std::max(worst, e);
    meta.push_back({{"condition", condition.describe()}, {"scale", o.scale}, {"seed", seed}, {"index", i},
                    {"edit", spec}, {"observed_max_error", e}, {"checkpoint_hash", ckpt_hash}});
  }
  write_outputs(o.out, motions, ck.meta.skeleton, meta, o.render, o.style.style());
  write_manifest(o.out, run, {{"checkpoint_hash", ckpt_hash}, {"reference_hash", hash_file(o.ref)},
                              {"seeds", {{"edit", o.seed}}}, {"observed_max_error", worst}});
  run.out << "wrote " << o.n << " edited motions to " << o.out << " (observed max error " << worst << ")\n";
  return 0;
}

struct EvalOpts {
  std::string ckpt, data, out, evaluator, text_embeddings;
  std::vector<double> scales = {0, 1, 1.5, 2.5, 4, 7};
  EvalConfig config;
  int classifier_steps = EvaluatorConfig{}.classifier_steps;
  int embedder_steps = EvaluatorConfig{}.embedder_steps;
};

struct EvalSetup {
  LabeledDataset ds;
  std::string corpus_hash;
  LoadedCheckpoint ck;
  std::optional<Evaluators> ev;
};

EvalSetup eval_setup(const EvalOpts& o, const Run& run) {
  EvalSetup s{load_dataset(o.data), dataset_hash(o.data), load_checkpoint(o.ckpt, load_text_embedder(o.text_embeddings)),
              std::nullopt};
  if (!s.ck.meta.corpus_hash.empty() && s.ck.meta.corpus_hash != s.corpus_hash)
    run.err << "warning: checkpoint was trained on corpus " << s.ck.meta.corpus_hash << ", evaluating on "
            << s.corpus_hash << "\n";
  if (s.ck.config.feature_dim != s.ds.layout.dim()) throw ValidationError("--data: feature layout differs from --ckpt");
  EvaluatorConfig ec;
  ec.classifier_steps = o.classifier_steps;
  ec.embedder_steps = o.embedder_steps;
  const fs::path cache = o.evaluator.empty() ? fs::path(o.out) / "evaluators.ckpt" : fs::path(o.evaluator);
  s.ev = load_or_train_evaluators(cache, s.ds, s.corpus_hash, ec);
  run.out << "evaluators: classifier test accuracy " << s.ev->test_accuracy() << "\n";
  return s;
}

int cmd_eval(const EvalOpts& o, const Run& run) {
  o.config.validate();
  auto s = eval_setup(o, run);
  const DenoiserX0Model model(s.ck.model);
  const auto schedule = make_cosine_schedule(s.ck.config.diffusion_steps);
  const auto t0 = std::chrono::steady_clock::now();
  auto report = evaluate(model, s.ck.config.condition_mode, s.ds, s.ck.meta.stats, *s.ev, schedule, o.config);
  report.info["checkpoint_hash"] = hash_file(o.ckpt);
  fs::create_directories(o.out);
  write_text_file(fs::path(o.out) / "report.json", report.to_json().dump(2) + "\n");
  write_text_file(fs::path(o.out) / "report.txt", report.table());
  write_manifest(o.out, run,
                 {{"checkpoint_hash", hash_file(o.ckpt)}, {"corpus_hash", s.corpus_hash},
                  {"seeds", {{"eval", o.config.seed}}},
                  {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
  run.out << report.table();
  return 0;
}

int cmd_sweep(const EvalOpts& o, const Run& run) {
  o.config.validate();
  auto s = eval_setup(o, run);
  const DenoiserX0Model model(s.ck.model);
  const auto schedule = make_cosine_schedule(s.ck.config.diffusion_steps);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = guidance_sweep(model, s.ck.config.condition_mode, s.ds, s.ck.meta.stats, *s.ev, schedule,
                                     o.scales, o.config, [&](double scale, const EvalReport& r) {
                                       run.out << "s = " << scale << "\n" << r.table();
                                     });
  fs::create_directories(o.out);
  write_text_file(fs::path(o.out) / "sweep.csv", result.csv());
  write_text_file(fs::path(o.out) / "sweep.json", result.to_json().dump(2) + "\n");
  write_text_file(fs::path(o.out) / "sweep.txt", result.table());
  write_manifest(o.out, run,
                 {{"checkpoint_hash", hash_file(o.ckpt)}, {"corpus_hash", s.corpus_hash},
                  {"seeds", {{"eval", o.config.seed}}},
                  {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}});
  run.out << result.table();
  return 0;
}

struct FileOpts {
  std::string in, out, format;
  RenderOpts style;
};

int cmd_render(const FileOpts& o, const Run& run) {
  const auto mf = read_motion_file(o.in);
  const auto files = render_motion(mf.motion, mf.skeleton, render_format_from_string(o.style.format), o.style.style(), o.out);
  run.out << "wrote " << files.size() << " file(s) for " << mf.motion.frames() << " frames\n";
  return 0;
}

int cmd_export(const FileOpts& o, const Run& run) {
  const auto mf = read_motion_file(o.in);
  if (o.format == "json") {
    write_text_file(o.out, motion_to_json(mf).dump() + "\n");
  } else if (o.format == "csv") {
    // Joint positions from FK over the rotation channels, one row per frame.
    const auto p = fk_positions_from_features(mf.skeleton, mf.motion);
    std::ostringstream os;
    os << "frame";
    for (const auto& name : mf.skeleton.joint_names()) os << "," << name << "_x," << name << "_y," << name << "_z";
    os << "\n" << std::setprecision(9);
    for (int f = 0; f < p.frames; ++f) {
      os << f;
      for (int j = 0; j < p.joints; ++j) os << "," << p.at(f, j).x() << "," << p.at(f, j).y() << "," << p.at(f, j).z();
      os << "\n";
    }
    write_text_file(o.out, os.str());
  } else {
    throw ValidationError("--format: expected json or csv");
  }
  run.out << "exported " << o.in << " -> " << o.out << "\n";
  return 0;
}

int dispatch(const std::vector<std::string>& raw, std::ostream& out, std::ostream& err, std::optional<int> threads);

struct ReplayOpts {
  std::string manifest, out;
};

int cmd_replay(const ReplayOpts& o, const Run& run) {
  json m;
  try {
    m = json::parse(read_text_file(o.manifest));
  } catch (const json::exception& e) {
    throw ValidationError("--manifest: " + std::string(e.what()));
  }
  if (!m.contains("args") || !m["args"].is_array()) throw ValidationError("--manifest: no recorded args");
  auto args = m["args"].get<std::vector<std::string>>();
  if (!args.empty() && args.front() == "replay") throw ValidationError("--manifest: refusing to replay a replay");
  if (!o.out.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
      if (args[i] == "--out") {
        args[i + 1] = o.out;
        replaced = true;
      }
    for (auto& a : args)
      if (a.rfind("--out=", 0) == 0) {
        a = "--out=" + o.out;
        replaced = true;
      }
    if (!replaced) throw ValidationError("--out: the recorded command has no output directory");
  }
  run.out << "replaying: mdm";
  for (const auto& a : args) run.out << " " << a;
  run.out << "\n";
  return dispatch(args, run.out, run.err, m.value("threads", run.threads));
}

int dispatch(const std::vector<std::string>& raw, std::ostream& out, std::ostream& err, std::optional<int> threads) {
  CLI::App app{"Motion diffusion toolkit", "mdm"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  const auto add_config = [](CLI::App* sub) {
    sub->add_option("--config", "JSON file of flag values; command-line flags win");
  };

  GenCorpusOpts gc;
  auto* s_gen = app.add_subcommand("gen-corpus", "Generate the procedural motion corpus");
  add_config(s_gen);
  s_gen->add_option("--families", gc.families, "Comma-separated motion families")->delimiter(',')->capture_default_str();
  s_gen->add_option("--per-family", gc.per_family, "Clips per family")->capture_default_str();
  s_gen->add_option("--frames-min", gc.frames_min)->capture_default_str();
  s_gen->add_option("--frames-max", gc.frames_max)->capture_default_str();
  s_gen->add_option("--fps", gc.fps)->capture_default_str();
  s_gen->add_option("--test-fraction", gc.test_fraction)->capture_default_str();
  s_gen->add_option("--seed", gc.seed)->capture_default_str();
  s_gen->add_option("--out", gc.out, "Output directory")->required();

  TrainOpts tr;
  auto* s_train = app.add_subcommand("train", "Train a denoiser");
  add_config(s_train);
  s_train->add_option("--data", tr.data, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  s_train->add_option("--out", tr.out, "Run directory")->required();
  s_train->add_option("--cond", tr.cond, "text | action | none")->capture_default_str();
  s_train->add_option("--arch", tr.arch, "encoder | decoder_cross_attention | decoder_plus_token")->capture_default_str();
  s_train->add_option("--latent", tr.latent)->capture_default_str();
  s_train->add_option("--layers", tr.layers)->capture_default_str();
  s_train->add_option("--heads", tr.heads)->capture_default_str();
  s_train->add_option("--ff", tr.ff)->capture_default_str();
  s_train->add_option("--dropout", tr.dropout)->capture_default_str();
  s_train->add_option("--max-frames", tr.max_frames)->capture_default_str();
  s_train->add_option("--diffusion-steps", tr.diffusion_steps)->capture_default_str();
  s_train->add_option("--text-embeddings", tr.text_embeddings, "Precomputed prompt embeddings (JSON)")
      ->check(CLI::ExistingFile);
  s_train->add_option("--steps", tr.steps)->capture_default_str();
  s_train->add_option("--batch", tr.batch)->capture_default_str();
  s_train->add_option("--lr", tr.lr)->capture_default_str();
  s_train->add_option("--cfg-prob", tr.cfg_prob, "Probability of training with c = null")->capture_default_str();
  s_train->add_option("--lambda-pos", tr.lambda_pos)->capture_default_str();
  s_train->add_option("--lambda-vel", tr.lambda_vel)->capture_default_str();
  s_train->add_option("--lambda-foot", tr.lambda_foot)->capture_default_str();
  s_train->add_flag("--positions-only", tr.positions_only, "Geometric losses read the position channels");
  s_train->add_option("--clip-norm", tr.clip_norm)->capture_default_str();
  s_train->add_option("--seed", tr.seed)->capture_default_str();
  s_train->add_option("--log-interval", tr.log_interval)->capture_default_str();
  s_train->add_option("--eval-interval", tr.eval_interval, "Steps between FID evaluations (0 = off)")
      ->capture_default_str();
  s_train->add_option("--eval-samples", tr.eval_samples, "Samples per class/prompt group during training eval")
      ->capture_default_str();
  s_train->add_option("--evaluator", tr.evaluator, "Evaluator cache file");
  s_train->add_option("--checkpoint-interval", tr.checkpoint_interval)->capture_default_str();
  s_train->add_option("--resume", tr.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);

  const auto add_render = [](CLI::App* sub, RenderOpts& r) {
    sub->add_option("--view", r.view, "front | side | top")->capture_default_str();
    sub->add_option("--trail", r.trail)->capture_default_str();
    sub->add_option("--width", r.width)->capture_default_str();
    sub->add_option("--height", r.height)->capture_default_str();
    sub->add_flag("--positions", r.positions, "Draw the position channels instead of FK over rotations");
  };

  SampleOpts sa;
  auto* s_sample = app.add_subcommand("sample", "Generate motions from a checkpoint");
  add_config(s_sample);
  s_sample->add_option("--ckpt", sa.ckpt)->required()->check(CLI::ExistingFile);
  s_sample->add_option("--text", sa.text, "Text prompt");
  s_sample->add_option("--action", sa.action, "Action class name or id");
  s_sample->add_option("--n", sa.n)->capture_default_str();
  s_sample->add_option("--frames", sa.frames)->capture_default_str();
  s_sample->add_option("--scale", sa.scale, "Guidance scale s")->capture_default_str();
  s_sample->add_option("--seed", sa.seed)->capture_default_str();
  s_sample->add_option("--out", sa.out)->required();
  s_sample->add_option("--render", sa.render, "gif | svg | png");
  s_sample->add_option("--text-embeddings", sa.text_embeddings)->check(CLI::ExistingFile);
  add_render(s_sample, sa.style);

  EditOpts ed;
  auto* s_edit = app.add_subcommand("edit", "In-betweening and body-part editing");
  add_config(s_edit);
  s_edit->add_option("--ckpt", ed.ckpt)->required()->check(CLI::ExistingFile);
  s_edit->add_option("--ref", ed.ref, "Reference motion file")->required()->check(CLI::ExistingFile);
  s_edit->add_option("--preset", ed.preset, "inbetween | upper_body | lower_body");
  s_edit->add_option("--mask", ed.mask, "JSON edit spec")->check(CLI::ExistingFile);
  s_edit->add_option("--text", ed.text);
  s_edit->add_option("--action", ed.action);
  s_edit->add_option("--n", ed.n)->capture_default_str();
  s_edit->add_option("--scale", ed.scale)->capture_default_str();
  s_edit->add_option("--seed", ed.seed)->capture_default_str();
  s_edit->add_option("--out", ed.out)->required();
  s_edit->add_option("--render", ed.render, "gif | svg | png");
  s_edit->add_option("--text-embeddings", ed.text_embeddings)->check(CLI::ExistingFile);
  add_render(s_edit, ed.style);

  const auto add_eval = [&](CLI::App* sub, EvalOpts& e) {
    add_config(sub);
    sub->add_option("--ckpt", e.ckpt)->required()->check(CLI::ExistingFile);
    sub->add_option("--data", e.data)->required()->check(CLI::ExistingDirectory);
    sub->add_option("--out", e.out)->required();
    sub->add_option("--evaluator", e.evaluator, "Evaluator cache file (default: <out>/evaluators.ckpt)");
    sub->add_option("--text-embeddings", e.text_embeddings)->check(CLI::ExistingFile);
    sub->add_option("--reps", e.config.reps)->capture_default_str();
    sub->add_option("--scale", e.config.guidance_scale)->capture_default_str();
    sub->add_option("--seed", e.config.seed)->capture_default_str();
    sub->add_option("--samples-per-class", e.config.samples_per_class)->capture_default_str();
    sub->add_option("--unconditional-samples", e.config.unconditional_samples)->capture_default_str();
    sub->add_option("--max-prompts", e.config.max_prompts, "0 = every test clip")->capture_default_str();
    sub->add_option("--mm-prompts", e.config.mm_prompts)->capture_default_str();
    sub->add_option("--mm-samples", e.config.mm_samples)->capture_default_str();
    sub->add_option("--mm-pairs", e.config.mm_pairs)->capture_default_str();
    sub->add_option("--diversity-pairs", e.config.diversity_pairs)->capture_default_str();
    sub->add_option("--pool", e.config.rprecision_pool, "R-precision pool size")->capture_default_str();
    sub->add_option("--frames", e.config.frames, "0 = mean test length")->capture_default_str();
    sub->add_option("--subsample", e.config.subsample)->capture_default_str();
    sub->add_option("--batch", e.config.batch)->capture_default_str();
    sub->add_option("--classifier-steps", e.classifier_steps)->capture_default_str();
    sub->add_option("--embedder-steps", e.embedder_steps)->capture_default_str();
  };
  EvalOpts ev;
  auto* s_eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  add_eval(s_eval, ev);
  EvalOpts sw;
  auto* s_sweep = app.add_subcommand("sweep", "Guidance-scale sweep");
  add_eval(s_sweep, sw);
  s_sweep->add_option("--scales", sw.scales)->delimiter(',')->capture_default_str();

  FileOpts rd;
  auto* s_render = app.add_subcommand("render", "Render a motion file");
  add_config(s_render);
  s_render->add_option("--in", rd.in)->required()->check(CLI::ExistingFile);
  s_render->add_option("--out", rd.out, "File (gif, svg) or directory (png)")->required();
  s_render->add_option("--format", rd.style.format, "gif | svg | png")->capture_default_str();
  add_render(s_render, rd.style);

  FileOpts ex;
  auto* s_export = app.add_subcommand("export", "Export a motion file as JSON or joint-position CSV");
  add_config(s_export);
  s_export->add_option("--in", ex.in)->required()->check(CLI::ExistingFile);
  s_export->add_option("--out", ex.out)->required();
  ex.format = "json";
  s_export->add_option("--format", ex.format, "json | csv")->capture_default_str();

  ReplayOpts rp;
  auto* s_replay = app.add_subcommand("replay", "Re-run a command from its manifest");
  s_replay->add_option("--manifest", rp.manifest)->required()->check(CLI::ExistingFile);
  s_replay->add_option("--out", rp.out, "Override the output directory");

  std::vector<std::string> args;
  try {
    args = expand_config(raw);
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const int n_threads = threads.value_or(worker_threads());
  torch::set_num_threads(n_threads);
  CLI::App* sub = app.get_subcommands().front();
  Run run{sub->get_name(), args, option_values(sub), utc_now(), n_threads, out, err};
  if (sub == s_gen) return cmd_gen_corpus(gc, run);
  if (sub == s_train) return cmd_train(tr, run);
  if (sub == s_sample) return cmd_sample(sa, run);
  if (sub == s_edit) return cmd_edit(ed, run);
  if (sub == s_eval) return cmd_eval(ev, run);
  if (sub == s_sweep) return cmd_sweep(sw, run);
  if (sub == s_render) return cmd_render(rd, run);
  if (sub == s_export) return cmd_export(ex, run);
  if (sub == s_replay) return cmd_replay(rp, run);
  return 2;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err, std::nullopt);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mdm

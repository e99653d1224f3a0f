#include "bioenc/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "bioenc/checkpoint.hpp"
#include "bioenc/synth.hpp"

namespace bioenc {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) parts.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) parts.emplace_back();
  return parts;
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw ConfigError("config key '" + key + "': cannot parse value '" + value + "'");
}

long long parse_int(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(value, &pos);
  } catch (const std::exception&) {
    bad_value(key, value);
  }
  if (pos != value.size()) bad_value(key, value);
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(value, &pos);
  } catch (const std::exception&) {
    bad_value(key, value);
  }
  if (pos != value.size()) bad_value(key, value);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(key, value);
}

StageInit parse_init(const std::string& key, const std::string& value) {
  if (value == "fresh") return StageInit::kFresh;
  if (value == "continue") return StageInit::kContinue;
  bad_value(key, value);
}

std::vector<ConvSpec> parse_cnn(const std::string& key, const std::string& value) {
  std::vector<ConvSpec> out;
  for (const auto& layer : split_on(value, ',')) {
    const auto f = split_on(layer, ':');
    if (f.size() != 3) bad_value(key, value);
    out.push_back({static_cast<int>(parse_int(key, f[0])), static_cast<int>(parse_int(key, f[1])),
                   static_cast<int>(parse_int(key, f[2]))});
  }
  return out;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto int_field = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) {
        member(c) = static_cast<int>(parse_int(k, v));
      };
    };
    auto double_field = [](auto member) {
      return [member](RunConfig& c, const std::string& k, const std::string& v) { member(c) = parse_double(k, v); };
    };
    t["model.cnn"] = [](RunConfig& c, const std::string& k, const std::string& v) { c.model.cnn = parse_cnn(k, v); };
    t["model.depth"] = int_field([](RunConfig& c) -> int& { return c.model.depth; });
    t["model.hidden_dim"] = int_field([](RunConfig& c) -> int& { return c.model.hidden_dim; });
    t["model.heads"] = int_field([](RunConfig& c) -> int& { return c.model.heads; });
    t["model.ffn_dim"] = int_field([](RunConfig& c) -> int& { return c.model.ffn_dim; });
    t["model.proj_dim"] = int_field([](RunConfig& c) -> int& { return c.model.proj_dim; });
    t["model.num_units"] = int_field([](RunConfig& c) -> int& { return c.model.num_units; });
    t["model.temperature"] = double_field([](RunConfig& c) -> double& { return c.model.temperature; });
    t["model.mask_span"] = int_field([](RunConfig& c) -> int& { return c.model.mask_span; });
    t["model.mask_start_prob"] = double_field([](RunConfig& c) -> double& { return c.model.mask_start_prob; });
    t["model.dropout"] = double_field([](RunConfig& c) -> double& { return c.model.dropout; });
    t["pretrain.lr"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.lr = c.stage2.lr = parse_double(k, v);
    };
    t["pretrain.batch_seconds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.batch_seconds = c.stage2.batch_seconds = parse_double(k, v);
    };
    t["pretrain.steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.total_steps = c.stage2.total_steps = static_cast<int>(parse_int(k, v));
    };
    t["pretrain.stage1_steps"] = int_field([](RunConfig& c) -> int& { return c.stage1.total_steps; });
    t["pretrain.stage2_steps"] = int_field([](RunConfig& c) -> int& { return c.stage2.total_steps; });
    t["pretrain.warmup_steps"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.warmup_steps = c.stage2.warmup_steps = static_cast<int>(parse_int(k, v));
    };
    t["pretrain.clip_grad_norm"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.clip_grad_norm = c.stage2.clip_grad_norm = parse_double(k, v);
    };
    t["pretrain.checkpoint_every"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage1.checkpoint_every = c.stage2.checkpoint_every = static_cast<int>(parse_int(k, v));
    };
    t["pretrain.layer"] = int_field([](RunConfig& c) -> int& { return c.layer; });
    t["pretrain.init"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.stage2_init = parse_init(k, v);
    };
    t["kmeans.max_iters"] = int_field([](RunConfig& c) -> int& { return c.kmeans.max_iters; });
    t["kmeans.max_frames"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      const long long n = parse_int(k, v);
      if (n < 1) bad_value(k, v);
      c.kmeans.max_frames = static_cast<std::size_t>(n);
    };
    t["finetune.lrs"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.finetune.lrs.clear();
      for (const auto& part : split_on(v, ',')) c.finetune.lrs.push_back(parse_double(k, part));
    };
    t["finetune.epochs"] = int_field([](RunConfig& c) -> int& { return c.finetune.epochs; });
    t["finetune.batch_size"] = int_field([](RunConfig& c) -> int& { return c.finetune.batch_size; });
    t["finetune.freeze_cnn"] = [](RunConfig& c, const std::string& k, const std::string& v) {
      c.finetune.freeze_cnn = parse_bool(k, v);
    };
    t["detect.threshold"] = double_field([](RunConfig& c) -> double& { return c.threshold; });
    t["detect.min_overlap"] = double_field([](RunConfig& c) -> double& { return c.min_overlap_s; });
    return t;
  }();
  return table;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

ManifestTask parse_task(const std::string& s, const fs::path& path) {
  if (s == "unlabeled") return ManifestTask::kUnlabeled;
  if (s == "classification") return ManifestTask::kClassification;
  if (s == "detection") return ManifestTask::kDetection;
  throw DataError(path.string() + ": unknown task '" + s + "'");
}

std::vector<AudioClip> load_all(const DatasetManifest& m, int sample_rate) {
  std::vector<AudioClip> clips;
  for (const auto& e : m.entries) clips.push_back(load_entry_audio(e, sample_rate));
  return clips;
}

Task task_of(const DatasetManifest& m) {
  if (m.task == ManifestTask::kClassification) return Task::kClassification;
  if (m.task == ManifestTask::kDetection) return Task::kDetection;
  throw DataError("manifest '" + m.dataset_id + "' has no labels (task unlabeled)");
}

void check_head_matches(const CheckpointContainer& c, const DatasetManifest& m) {
  if (!c.metadata.contains("finetune_task")) throw DataError("checkpoint has no fine-tuned classifier head");
  if (c.metadata.at("finetune_task").get<std::string>() != to_string(m.task)) {
    throw DataError("checkpoint task '" + c.metadata.at("finetune_task").get<std::string>() +
                    "' does not match manifest task '" + to_string(m.task) + "'");
  }
  if (c.metadata.at("classes").get<std::vector<std::string>>() != m.classes) {
    throw DataError("checkpoint classes do not match manifest classes");
  }
}

AudioClip named(AudioClip clip, std::string id) {
  clip.source_id = std::move(id);
  return clip;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

RunConfig::RunConfig() {
  finetune.batch_size = 8;
  stage2.stage = 2;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, _] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

void apply_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(cfg, key, value);
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" + line + "'");
    }
    apply_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.model.validate();
  cfg.stage1.validate();
  cfg.stage2.validate();
  cfg.finetune.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---------------------------------------------------------------------------
// Manifests

const char* to_string(ManifestTask task) {
  switch (task) {
    case ManifestTask::kUnlabeled: return "unlabeled";
    case ManifestTask::kClassification: return "classification";
    case ManifestTask::kDetection: return "detection";
  }
  return "unknown";
}

int DatasetManifest::class_index(const std::string& name) const {
  const auto it = std::find(classes.begin(), classes.end(), name);
  return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
}

std::vector<const ManifestEntry*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(&e);
  }
  return out;
}

void validate_manifest(const DatasetManifest& m) {
  const std::string where = "manifest '" + m.dataset_id + "'";
  std::set<std::string> seen_classes;
  for (const auto& c : m.classes) {
    if (c.empty() || !seen_classes.insert(c).second) throw DataError(where + ": empty or duplicate class '" + c + "'");
  }
  if (m.task != ManifestTask::kUnlabeled && m.classes.empty()) throw DataError(where + ": no classes");
  if (m.task == ManifestTask::kDetection && !(m.window_s > 0.0 && m.hop_s > 0.0)) {
    throw DataError(where + ": window_s and hop_s must be positive");
  }
  if (m.entries.empty()) throw DataError(where + ": no entries");
  std::map<std::string, std::string> split_of;
  for (const auto& e : m.entries) {
    if (e.recording_id.empty()) throw DataError(where + ": entry without recording_id");
    if (e.recording_id.find_first_of(",\n") != std::string::npos) {
      throw DataError(where + ": recording_id '" + e.recording_id + "' contains a comma or newline");
    }
    if (e.split != "train" && e.split != "valid" && e.split != "test") {
      throw DataError(where + ": recording '" + e.recording_id + "' has unknown split '" + e.split + "'");
    }
    const auto [it, inserted] = split_of.emplace(e.recording_id, e.split);
    if (!inserted) {
      throw DataError(where + ": recording '" + e.recording_id + "' listed twice (splits " + it->second + " and " +
                      e.split + ")");
    }
    if (m.task == ManifestTask::kClassification && m.class_index(e.label) < 0) {
      throw DataError(where + ": recording '" + e.recording_id + "' has unknown class '" + e.label + "'");
    }
    if (m.task == ManifestTask::kDetection) {
      for (const auto& ev : e.events) {
        if (m.class_index(ev.cls) < 0) {
          throw DataError(where + ": recording '" + e.recording_id + "' has unknown class '" + ev.cls + "'");
        }
        if (!(ev.onset_s >= 0.0 && ev.offset_s > ev.onset_s)) {
          throw DataError(where + ": recording '" + e.recording_id + "' has an event with bad boundaries");
        }
      }
    }
    if (!fs::exists(e.path)) throw DataError(where + ": audio file not found: " + e.path.string());
  }
}

DatasetManifest load_manifest(const fs::path& header_path) {
  if (!fs::exists(header_path)) throw DataError("manifest not found: " + header_path.string());
  json header;
  try {
    header = json::parse(read_text(header_path));
  } catch (const json::exception& ex) {
    throw DataError(header_path.string() + ": " + ex.what());
  }
  DatasetManifest m;
  const fs::path base = fs::absolute(header_path).parent_path();
  fs::path entries_path;
  try {
    m.dataset_id = header.value("dataset_id", header_path.stem().string());
    m.task = parse_task(header.value("task", std::string("unlabeled")), header_path);
    m.classes = header.value("classes", std::vector<std::string>{});
    m.window_s = header.value("window_s", 1.0);
    m.hop_s = header.value("hop_s", 0.5);
    entries_path = base / header.at("entries").get<std::string>();
  } catch (const json::exception& ex) {
    throw DataError(header_path.string() + ": " + ex.what());
  }
  if (!fs::exists(entries_path)) throw DataError("manifest entries not found: " + entries_path.string());
  std::istringstream in(read_text(entries_path));
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.path = base / j.at("path").get<std::string>();
      e.recording_id = j.at("recording_id").get<std::string>();
      e.split = j.value("split", std::string("train"));
      e.label = j.value("label", std::string());
      if (j.contains("events")) {
        for (const auto& ev : j.at("events")) {
          e.events.push_back(
              {ev.at("class").get<std::string>(), ev.at("onset_s").get<double>(), ev.at("offset_s").get<double>()});
        }
      }
      m.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw DataError(entries_path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  validate_manifest(m);
  return m;
}

void write_manifest(const fs::path& header_path, const DatasetManifest& m) {
  const fs::path base = fs::absolute(header_path).parent_path();
  const std::string entries_name = header_path.stem().string() + ".jsonl";
  std::string lines;
  for (const auto& e : m.entries) {
    json j;
    j["path"] = fs::relative(fs::absolute(e.path), base).generic_string();
    j["recording_id"] = e.recording_id;
    j["split"] = e.split;
    if (m.task == ManifestTask::kClassification) j["label"] = e.label;
    if (m.task == ManifestTask::kDetection) {
      j["events"] = json::array();
      for (const auto& ev : e.events) {
        j["events"].push_back({{"class", ev.cls}, {"onset_s", ev.onset_s}, {"offset_s", ev.offset_s}});
      }
    }
    lines += j.dump() + "\n";
  }
  write_file_atomic(base / entries_name, lines);
  json header = {{"dataset_id", m.dataset_id}, {"task", to_string(m.task)}, {"entries", entries_name}};
  if (m.task != ManifestTask::kUnlabeled) header["classes"] = m.classes;
  if (m.task == ManifestTask::kDetection) {
    header["window_s"] = m.window_s;
    header["hop_s"] = m.hop_s;
  }
  write_json(header_path, header);
}

AudioClip load_entry_audio(const ManifestEntry& entry, int sample_rate) {
  AudioClip clip = load_wav(entry.path);
  if (clip.sample_rate != sample_rate) clip = resample(clip, sample_rate);
  clip.source_id = entry.recording_id;
  return clip;
}

std::vector<Example> build_examples(const DatasetManifest& m, const std::string& split, int sample_rate,
                                    double min_overlap_s) {
  const int classes = static_cast<int>(m.classes.size());
  std::vector<Example> out;
  for (const ManifestEntry* e : m.split(split)) {
    AudioClip clip = load_entry_audio(*e, sample_rate);
    if (m.task == ManifestTask::kClassification) {
      RowVec target = RowVec::Zero(classes);
      target(m.class_index(e->label)) = 1.0;
      out.push_back({std::move(clip), std::move(target)});
    } else if (m.task == ManifestTask::kDetection) {
      std::vector<DetectionEvent> events;
      for (const auto& ev : e->events) events.push_back({m.class_index(ev.cls), ev.onset_s, ev.offset_s, e->recording_id});
      const auto segments = window(clip, m.window_s, m.hop_s);
      const Eigen::MatrixXi labels = segment_labels(events, segments, classes, min_overlap_s);
      for (std::size_t s = 0; s < segments.size(); ++s) {
        out.push_back({segments[s].clip, labels.row(static_cast<Eigen::Index>(s)).cast<double>()});
      }
    } else {
      throw DataError("manifest '" + m.dataset_id + "' has no labels (task unlabeled)");
    }
  }
  return out;
}

Mat embed_clips(const EncoderModel& model, std::span<const AudioClip> clips) {
  Mat out(static_cast<Eigen::Index>(clips.size()), model.config().hidden_dim);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = mean_pool(forward(model, clips[i]).hidden);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

RunConfig resolve_config(const GlobalOptions& global) {
  RunConfig cfg = global.config ? load_run_config(*global.config) : RunConfig{};
  cfg.stage1.seed = mix_seed(global.seed, 0x5101);
  cfg.stage2.seed = mix_seed(global.seed, 0x5102);
  cfg.kmeans.seed = global.seed;
  cfg.finetune.seed = global.seed;
  return cfg;
}

void cmd_synth(const GlobalOptions& global, const SynthArgs& args) {
  if (args.out_dir.empty()) throw ConfigError("synth: --out is required");
  fs::create_directories(args.out_dir / "audio");
  DatasetManifest m;
  const auto add = [&](const AudioClip& clip, const std::string& split) -> ManifestEntry& {
    const fs::path wav = args.out_dir / "audio" / (clip.source_id + ".wav");
    save_wav(wav, clip);
    ManifestEntry e;
    e.path = wav;
    e.recording_id = clip.source_id;
    e.split = split;
    m.entries.push_back(e);
    return m.entries.back();
  };
  const std::vector<std::pair<std::string, std::uint64_t>> splits = {{"train", 1}, {"valid", 2}, {"test", 3}};

  if (args.kind == "pretrain") {
    m.dataset_id = "synth_pretrain";
    m.task = ManifestTask::kUnlabeled;
    for (const auto& clip : synth_pretrain_corpus(args.clips, args.clip_s, global.seed)) add(clip, "train");
  } else if (args.kind == "tones") {
    m.dataset_id = "synth_tones";
    m.task = ManifestTask::kClassification;
    const ToneClassSpec spec;
    for (double f : spec.freqs_hz) m.classes.push_back("tone" + fmt(f));
    const std::map<std::string, int> counts = {
        {"train", args.per_class_train}, {"valid", args.per_class_valid}, {"test", args.per_class_test}};
    for (const auto& [split, salt] : splits) {
      if (counts.at(split) < 1) continue;
      for (auto& lc : synth_tone_classes(counts.at(split), spec, mix_seed(global.seed, salt))) {
        add(named(lc.clip, split + "_" + lc.clip.source_id), split).label = m.classes[static_cast<std::size_t>(lc.label)];
      }
    }
  } else if (args.kind == "bursts") {
    m.dataset_id = "synth_bursts";
    m.task = ManifestTask::kDetection;
    m.window_s = 1.0;
    m.hop_s = 0.5;
    const BurstSpec spec;
    for (double f : spec.freqs_hz) m.classes.push_back("tone" + fmt(f));
    const std::map<std::string, int> counts = {
        {"train", args.recordings_train}, {"valid", args.recordings_valid}, {"test", args.recordings_test}};
    for (const auto& [split, salt] : splits) {
      if (counts.at(split) < 1) continue;
      for (const auto& rec : synth_burst_recordings(counts.at(split), spec, mix_seed(global.seed, salt), split)) {
        ManifestEntry& e = add(rec.clip, split);
        for (const auto& ev : rec.events) {
          e.events.push_back({m.classes[static_cast<std::size_t>(ev.class_id)], ev.onset_s, ev.offset_s});
        }
      }
    }
  } else {
    throw ConfigError("synth: unknown kind '" + args.kind + "' (expected pretrain, tones or bursts)");
  }
  write_manifest(args.out_dir / "manifest.json", m);
  std::cerr << "wrote " << m.entries.size() << " clips to " << args.out_dir.string() << "\n";
}

void cmd_pretrain(const GlobalOptions& global, const PretrainArgs& args) {
  RunConfig rc = resolve_config(global);
  if (args.init) rc.stage2_init = parse_init("--init", *args.init);
  if (args.out_dir.empty()) throw ConfigError("pretrain: --out is required");
  const DatasetManifest m = load_manifest(args.manifest);
  const std::vector<AudioClip> corpus = load_all(m, rc.model.sample_rate);
  fs::create_directories(args.out_dir);

  TwoStageConfig cfg;
  cfg.model = rc.model;
  cfg.stage1 = rc.stage1;
  cfg.stage2 = rc.stage2;
  cfg.kmeans = rc.kmeans;
  cfg.layer = rc.layer;
  cfg.stage2_init = rc.stage2_init;
  cfg.stage1_only = args.stage1_only;
  cfg.seed = global.seed;

  std::string log;
  const auto on_step = [&](const StepLog& s) {
    log += json{{"stage", s.stage}, {"step", s.step}, {"loss", s.loss}, {"lr", s.lr}, {"wall_ms", s.wall_ms}}.dump() +
           "\n";
    if (s.step == 1 || s.step % 20 == 0) {
      std::cerr << "stage " << s.stage << " step " << s.step << " loss " << fmt(s.loss) << " (" << fmt(s.wall_ms)
                << " ms)\n";
    }
  };
  const auto periodic = [&](int stage) {
    return [&, stage](int step, const EncoderModel& model, const AdamState& adam) {
      const int every = stage == 1 ? cfg.stage1.checkpoint_every : cfg.stage2.checkpoint_every;
      if (every <= 0) return;
      CheckpointContainer c;
      c.metadata["stage"] = stage;
      c.metadata["step"] = step;
      c.metadata["seed"] = global.seed;
      put_model(c, model);
      put_adam(c, adam);
      save_checkpoint(args.out_dir / ("stage" + std::to_string(stage) + "_step" + std::to_string(step) + ".avsc"), c);
    };
  };
  TwoStageHooks hooks;
  hooks.stage1.on_step = on_step;
  hooks.stage2.on_step = on_step;
  hooks.stage1.on_checkpoint = periodic(1);
  hooks.stage2.on_checkpoint = periodic(2);

  const TwoStageResult r = run_two_stage(corpus, cfg, hooks);

  const auto annotate = [&](CheckpointContainer c) {
    c.metadata["dataset_id"] = m.dataset_id;
    c.metadata["deterministic"] = global.deterministic;
    c.metadata["recordings"] = corpus.size();
    return c;
  };
  save_checkpoint(args.out_dir / "stage1.avsc", annotate(r.stage1_checkpoint(cfg)));
  write_file_atomic(args.out_dir / "units_stage1.jsonl", units_to_jsonl(r.units1));
  if (!cfg.stage1_only) {
    save_checkpoint(args.out_dir / "stage2.avsc", annotate(r.final_checkpoint(cfg)));
    write_file_atomic(args.out_dir / "units_stage2.jsonl", units_to_jsonl(r.units2));
  }
  write_file_atomic(args.out_dir / "loss_log.jsonl", log);
}

void cmd_finetune(const GlobalOptions& global, const FinetuneArgs& args) {
  const RunConfig rc = resolve_config(global);
  if (args.out_dir.empty()) throw ConfigError("finetune: --out is required");
  const CheckpointContainer src = load_checkpoint(args.checkpoint);
  const DatasetManifest m = load_manifest(args.manifest);
  const EncoderModel pretrained = get_model(src);

  FinetuneConfig fc = rc.finetune;
  fc.task = task_of(m);
  LabeledSplits data;
  data.num_classes = static_cast<int>(m.classes.size());
  data.train = build_examples(m, "train", pretrained.config().sample_rate, rc.min_overlap_s);
  data.valid = build_examples(m, "valid", pretrained.config().sample_rate, rc.min_overlap_s);

  const FinetuneResult result = finetune(pretrained, data, fc);

  CheckpointContainer out;
  out.metadata["finetune_task"] = to_string(m.task);
  out.metadata["classes"] = m.classes;
  out.metadata["dataset_id"] = m.dataset_id;
  out.metadata["window_s"] = m.window_s;
  out.metadata["hop_s"] = m.hop_s;
  out.metadata["min_overlap_s"] = rc.min_overlap_s;
  out.metadata["finetune"] = to_json(fc);
  out.metadata["report"] = result.report.to_json();
  out.metadata["seed"] = global.seed;
  out.metadata["deterministic"] = global.deterministic;
  out.metadata["pretrained"] = src.metadata;
  out.metadata["pretrained"].erase("loss_trace");
  put_model(out, result.best);
  fs::create_directories(args.out_dir);
  save_checkpoint(args.out_dir / "model.avsc", out);
  json report = result.report.to_json();
  report["task"] = to_string(m.task);
  report["dataset_id"] = m.dataset_id;
  report["config"] = to_json(fc);
  write_json(args.out_dir / "report.json", report);
  std::cerr << "best " << result.report.metric_name << " " << fmt(result.report.best_metric) << " at lr "
            << fmt(result.report.best_lr) << " epoch " << result.report.best_epoch << "\n";
}

void cmd_eval(const GlobalOptions& global, const EvalArgs& args) {
  const RunConfig rc = resolve_config(global);
  if (args.out_dir.empty()) throw ConfigError("eval: --out is required");
  const CheckpointContainer c = load_checkpoint(args.checkpoint);
  const DatasetManifest m = load_manifest(args.manifest);
  check_head_matches(c, m);
  const EncoderModel model = get_model(c);
  const Task task = task_of(m);
  const double min_overlap = c.metadata.value("min_overlap_s", rc.min_overlap_s);
  const std::vector<Example> examples = build_examples(m, args.split, model.config().sample_rate, min_overlap);
  if (examples.empty()) throw DataError("eval: split '" + args.split + "' of '" + m.dataset_id + "' is empty");

  const Mat scores = predict_scores(model, examples);
  json report;
  report["dataset_id"] = m.dataset_id;
  report["task"] = to_string(m.task);
  report["split"] = args.split;
  report["num_examples"] = examples.size();
  report["seed"] = global.seed;
  report["checkpoint_config"] = {{"model", c.metadata.at("model")}, {"finetune", c.metadata.value("finetune", json())}};
  const int classes = static_cast<int>(m.classes.size());
  double value = 0.0;
  json per_class = json::object();
  if (task == Task::kClassification) {
    std::vector<int> pred;
    std::vector<int> gold;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      Eigen::Index p = 0;
      Eigen::Index g = 0;
      scores.row(i).maxCoeff(&p);
      examples[static_cast<std::size_t>(i)].target.maxCoeff(&g);
      pred.push_back(static_cast<int>(p));
      gold.push_back(static_cast<int>(g));
    }
    value = accuracy(pred, gold);
    for (int k = 0; k < classes; ++k) {
      int total = 0;
      int hit = 0;
      for (std::size_t i = 0; i < gold.size(); ++i) {
        if (gold[i] != k) continue;
        ++total;
        hit += pred[i] == k ? 1 : 0;
      }
      per_class[m.classes[static_cast<std::size_t>(k)]] = total ? json(static_cast<double>(hit) / total) : json();
    }
    report["metric_name"] = "accuracy";
  } else {
    Eigen::MatrixXi labels(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      labels.row(i) = (examples[static_cast<std::size_t>(i)].target.array() > 0.5).cast<int>();
    }
    const MapResult r = mean_average_precision(scores, labels);
    value = r.value;
    for (int k = 0; k < classes; ++k) {
      const auto& ap = r.per_class[static_cast<std::size_t>(k)];
      per_class[m.classes[static_cast<std::size_t>(k)]] = ap ? json(*ap) : json();
    }
    report["metric_name"] = "map";
  }
  report["value"] = value;
  report["per_class"] = per_class;

  fs::create_directories(args.out_dir);
  write_json(args.out_dir / "eval.json", report);
  const std::string name = args.model_name.empty() ? args.checkpoint.stem().string() : args.model_name;
  write_file_atomic(args.out_dir / "eval.csv", "model," + m.dataset_id + "\n" + name + "," + fmt(value) + "\n");
  std::cout << report["metric_name"].get<std::string>() << " " << fmt(value) << "\n";
}

void cmd_detect(const GlobalOptions& global, const DetectArgs& args) {
  const RunConfig rc = resolve_config(global);
  if (args.out.empty()) throw ConfigError("detect: --out is required");
  const CheckpointContainer c = load_checkpoint(args.checkpoint);
  if (c.metadata.value("finetune_task", std::string()) != "detection") {
    throw DataError("detect: " + args.checkpoint.string() + " is not a fine-tuned detection model");
  }
  const EncoderModel model = get_model(c);
  const double win = args.window_s.value_or(c.metadata.value("window_s", 1.0));
  const double hop = args.hop_s.value_or(c.metadata.value("hop_s", 0.5));
  const double threshold = args.threshold.value_or(rc.threshold);
  if (!(win > 0.0 && hop > 0.0)) throw ConfigError("detect: window and hop must be positive");

  AudioClip clip = load_wav(args.audio);
  if (clip.sample_rate != model.config().sample_rate) clip = resample(clip, model.config().sample_rate);
  clip.source_id = args.audio.stem().string();
  const DetectionResult r = detect(model, clip, win, hop, threshold);

  const auto classes = c.metadata.at("classes").get<std::vector<std::string>>();
  json out;
  out["recording_id"] = clip.source_id;
  out["classes"] = classes;
  out["window_s"] = win;
  out["hop_s"] = hop;
  out["threshold"] = threshold;
  out["segments"] = json::array();
  for (std::size_t s = 0; s < r.segments.size(); ++s) {
    std::vector<double> row(r.scores.cols());
    for (Eigen::Index k = 0; k < r.scores.cols(); ++k) row[static_cast<std::size_t>(k)] = r.scores(static_cast<Eigen::Index>(s), k);
    out["segments"].push_back({{"onset_s", r.segments[s].onset_s}, {"offset_s", r.segments[s].offset_s}, {"scores", row}});
  }
  out["events"] = json::array();
  for (const auto& ev : r.events) {
    out["events"].push_back({{"class", classes.at(static_cast<std::size_t>(ev.class_id))},
                             {"onset_s", ev.onset_s},
                             {"offset_s", ev.offset_s}});
  }
  write_json(args.out, out);
}

void cmd_embed(const GlobalOptions& global, const EmbedArgs& args) {
  (void)resolve_config(global);
  if (args.out.empty()) throw ConfigError("embed: --out is required");
  const CheckpointContainer c = load_checkpoint(args.checkpoint);
  const DatasetManifest m = load_manifest(args.manifest);
  const EncoderModel model = get_model(c);
  const std::vector<AudioClip> clips = load_all(m, model.config().sample_rate);
  const Mat emb = embed_clips(model, clips);

  std::string text;
  const bool jsonl = args.out.extension() == ".jsonl";
  if (!jsonl) {
    text = "recording_id,label";
    for (Eigen::Index d = 0; d < emb.cols(); ++d) text += ",d" + std::to_string(d);
    text += "\n";
  }
  for (std::size_t i = 0; i < m.entries.size(); ++i) {
    const auto& e = m.entries[i];
    const auto row = emb.row(static_cast<Eigen::Index>(i));
    if (jsonl) {
      text += json{{"recording_id", e.recording_id}, {"label", e.label},
                   {"embedding", std::vector<double>(row.begin(), row.end())}}
                  .dump() +
              "\n";
    } else {
      text += e.recording_id + "," + e.label;
      for (Eigen::Index d = 0; d < row.size(); ++d) text += "," + fmt(row(d));
      text += "\n";
    }
  }
  if (args.out.has_parent_path()) fs::create_directories(args.out.parent_path());
  write_file_atomic(args.out, text);
}

void cmd_tscore(const GlobalOptions& global, const TscoreArgs& args) {
  (void)global;
  if (args.inputs.empty()) throw ConfigError("tscore: at least one CSV is required");
  if (args.out.empty()) throw ConfigError("tscore: --out is required");
  std::vector<std::string> models;
  std::vector<std::string> datasets;
  std::map<std::pair<std::string, std::string>, double> cells;
  for (const auto& path : args.inputs) {
    std::istringstream in(read_text(path));
    std::string line;
    std::vector<std::string> header;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (trim(line).empty()) continue;
      const auto fields = split_on(trim(line), ',');
      if (header.empty()) {
        header = fields;
        if (header.size() < 2) throw DataError(path.string() + ": header needs a model column and a dataset column");
        for (std::size_t k = 1; k < header.size(); ++k) {
          if (std::find(datasets.begin(), datasets.end(), header[k]) == datasets.end()) datasets.push_back(header[k]);
        }
        continue;
      }
      if (fields.size() != header.size()) {
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                        " fields");
      }
      if (std::find(models.begin(), models.end(), fields[0]) == models.end()) models.push_back(fields[0]);
      for (std::size_t k = 1; k < fields.size(); ++k) {
        double v = 0.0;
        try {
          std::size_t pos = 0;
          v = std::stod(fields[k], &pos);
          if (pos != fields[k].size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
          throw DataError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + fields[k] + "'");
        }
        cells[{fields[0], header[k]}] = v;
      }
    }
  }
  if (models.size() < 2) throw DataError("tscore: need at least two models");
  Mat table(static_cast<Eigen::Index>(models.size()), static_cast<Eigen::Index>(datasets.size()));
  for (std::size_t i = 0; i < models.size(); ++i) {
    for (std::size_t k = 0; k < datasets.size(); ++k) {
      const auto it = cells.find({models[i], datasets[k]});
      if (it == cells.end()) throw DataError("tscore: no score for model '" + models[i] + "' on '" + datasets[k] + "'");
      table(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = it->second;
    }
  }
  const Mat t = t_scores(table);
  std::string text = "model";
  for (const auto& d : datasets) text += "," + d;
  text += ",mean\n";
  for (std::size_t i = 0; i < models.size(); ++i) {
    text += models[i];
    for (Eigen::Index k = 0; k < t.cols(); ++k) text += "," + fmt(t(static_cast<Eigen::Index>(i), k));
    text += "," + fmt(t.row(static_cast<Eigen::Index>(i)).mean()) + "\n";
  }
  write_file_atomic(args.out, text);
}

int run_guarded(const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const ConfigError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  } catch (const NumericError& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
}

}  // namespace bioenc

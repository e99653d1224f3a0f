// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero if any criterion fails.
//
//   bioenc_acceptance [work_dir]

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bioenc/checkpoint.hpp"
#include "bioenc/eval.hpp"
#include "bioenc/features.hpp"
#include "bioenc/model.hpp"
#include "bioenc/synth.hpp"
#include "bioenc/units.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace bioenc;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 6) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work;

// Runs the CLI with --deterministic; output goes to a log file in the work dir.
int cli(const std::string& args, const std::string& log) {
  const std::string cmd =
      std::string(BIOENC_CLI_PATH) + " --deterministic " + args + " > " + (work / (log + ".log")).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  if (code != 0) std::cerr << "command failed (" << code << "): " << cmd << "\n" << slurp(work / (log + ".log"));
  return code;
}

// ---------------------------------------------------------------------------
// Pipeline artifacts shared by criteria 6, 7, 8, 10 and 11.

struct Pipeline {
  bool ok = false;
  double pretrain_seconds = 0.0;
};

Pipeline run_pipeline(const std::string& tag) {
  Pipeline p;
  const auto t0 = std::chrono::steady_clock::now();
  if (cli("pretrain --manifest " + (work / "pre/manifest.json").string() + " --out " + (work / tag).string(),
          "pretrain_" + tag) != 0) {
    return p;
  }
  p.pretrain_seconds = seconds_since(t0);
  p.ok = cli("finetune --checkpoint " + (work / tag / "stage2.avsc").string() + " --manifest " +
                 (work / "tones/manifest.json").string() + " --out " + (work / tag / "ft_tones").string(),
             "finetune_tones_" + tag) == 0;
  return p;
}

// ---------------------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  const AudioClip clip = synth_tone(730.0, 0.4, 0.5, 0.2, 0.05, 3);
  double worst = 0.0;
  std::string worst_name;
  bool degenerate = false;
  auto check = [&](const std::string& loss_name, EncoderModel& model, const std::function<double()>& loss) {
    for (const auto& [group, e] : gradcheck::compare(model, loss)) {
      if (e.relative() > worst) {
        worst = e.relative();
        worst_name = loss_name + "/" + to_string(group);
      }
    }
  };

  {
    EncoderModel model(gradcheck::tiny_config(), 11);
    const Eigen::Index frames = cnn_encode(model, clip).frames();
    degenerate |= frames != 20;
    Rng rng(2);
    UnitSequence z;
    for (Eigen::Index t = 0; t < frames; ++t) z.units.push_back(static_cast<int>(rng.below(8)));
    MaskSpec m;
    m.seq_len = frames;
    m.masked_positions = {2, 3, 4, 5, 11, 12, 13, 14};
    model.zero_grad();
    pretrain_loss_and_grad(model, {&clip, nullptr}, m, z, GradOptions{});
    check("pretrain", model,
          [&] { return pretrain_loss(unit_probs(forward(model, clip, &m).hidden, model.predictor), z, m); });
  }
  for (HeadMode mode : {HeadMode::kSoftmaxCe, HeadMode::kSigmoidBce}) {
    EncoderModel model(gradcheck::tiny_config(), 12);
    model.attach_classifier(3, mode, 4);
    RowVec target = RowVec::Zero(3);
    target(1) = 1.0;
    if (mode == HeadMode::kSigmoidBce) target(2) = 1.0;
    model.zero_grad();
    finetune_loss_and_grad(model, {&clip, nullptr}, target, GradOptions{});
    check(mode == HeadMode::kSoftmaxCe ? "softmax_ce" : "sigmoid_bce", model,
          [&] { return finetune_loss(*model.classifier, classify(model, clip), target); });
  }
  const double secs = seconds_since(t0);
  return {!degenerate && worst < 1e-3 && secs < 120.0,
          "worst relative error " + fmt(worst, 3) + " (" + worst_name + "), " + fmt(secs, 3) + " s"};
}

Outcome masked_only_loss() {
  EncoderModel model(gradcheck::tiny_config(), 31);
  Rng rng(77);
  int identical = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const AudioClip clip = synth_tone(rng.uniform(200.0, 4000.0), rng.uniform(0.3, 1.0), 0.5, rng.uniform(0.0, 6.0),
                                      0.1, rng.next_u64());
    const Mat probs = unit_probs(forward(model, clip, nullptr).hidden, model.predictor);
    const Eigen::Index frames = probs.rows();
    MaskSpec mask = sample_mask(frames, model.config(), rng.next_u64());
    if (mask.masked_positions.empty()) mask.masked_positions = {static_cast<int>(rng.below(static_cast<std::uint64_t>(frames)))};
    UnitSequence z;
    for (Eigen::Index t = 0; t < frames; ++t) z.units.push_back(static_cast<int>(rng.below(8)));

    // Permute the targets among unmasked positions only.
    std::vector<std::size_t> free;
    for (Eigen::Index t = 0; t < frames; ++t) {
      if (!mask.contains(static_cast<int>(t))) free.push_back(static_cast<std::size_t>(t));
    }
    UnitSequence permuted = z;
    for (std::size_t i = free.size(); i > 1; --i) {
      std::swap(permuted.units[free[i - 1]], permuted.units[free[rng.below(i)]]);
    }
    // Plus an arbitrary relabel of one unmasked frame, so the trial is never vacuous.
    if (!free.empty()) permuted.units[free[0]] = (permuted.units[free[0]] + 1) % 8;

    const double a = pretrain_loss(probs, z, mask);
    const double b = pretrain_loss(probs, permuted, mask);
    EncoderModel ga = model;
    EncoderModel gb = model;
    ga.zero_grad();
    gb.zero_grad();
    const double la = pretrain_loss_and_grad(ga, {&clip, nullptr}, mask, z, GradOptions{});
    const double lb = pretrain_loss_and_grad(gb, {&clip, nullptr}, mask, permuted, GradOptions{});
    if (a == b && la == lb) ++identical;
  }
  return {identical == 100, std::to_string(identical) + "/100 trials bit-identical"};
}

Outcome cosine_softmax() {
  const EncoderModel model(gradcheck::tiny_config(), 5);
  double row_err = 0.0;
  double scale_err = 0.0;
  bool open_interval = true;
  Rng rng(9);
  for (int i = 0; i < 10; ++i) {
    const AudioClip clip = synth_tone(rng.uniform(200.0, 4000.0), 0.5, 0.5, 0.0, 0.1, rng.next_u64());
    const FrameFeatures h = forward(model, clip).hidden;
    const Mat p = unit_probs(h, model.predictor);
    for (Eigen::Index t = 0; t < p.rows(); ++t) row_err = std::max(row_err, std::abs(p.row(t).sum() - 1.0));
    open_interval = open_interval && p.minCoeff() > 0.0 && p.maxCoeff() < 1.0;
    for (double g : {1e-3, 0.37, 5.0, 1e3}) {
      FrameFeatures s = h;
      s.data *= g;
      scale_err = std::max(scale_err, (unit_probs(s, model.predictor) - p).cwiseAbs().maxCoeff());
    }
  }
  PredictorHead head;
  head.projection.value = Mat::Identity(2, 2);
  head.unit_embeddings.value = Mat::Identity(2, 2);
  head.temperature = 0.1;
  FrameFeatures aligned;
  aligned.data = Mat(1, 2);
  aligned.data << 2.5, 0.0;
  const double p1 = unit_probs(aligned, head)(0, 0);
  const double sigma10 = 1.0 / (1.0 + std::exp(-10.0));
  const bool pass = row_err < 1e-6 && open_interval && scale_err < 1e-9 && std::abs(p1 - sigma10) < 1e-6;
  return {pass, "row-sum err " + fmt(row_err, 3) + ", scale err " + fmt(scale_err, 3) + ", p(k=2) " + fmt(p1, 10) +
                    " vs sigma(10) " + fmt(sigma10, 10)};
}

Outcome kmeans_oracle() {
  int mismatched_sets = 0;
  int rising = 0;
  Rng rng(13);
  for (int set = 0; set < 20; ++set) {
    const int n = 20 + static_cast<int>(rng.below(181));
    const int d = 1 + static_cast<int>(rng.below(8));
    Mat pts(n, d);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.normal() * 2.0 + (i % 3) * 4.0;
    KMeansOptions opts;
    opts.k = 2 + static_cast<int>(rng.below(9));
    opts.seed = rng.next_u64();
    const Codebook cb = kmeans_fit(pts, opts);
    if (nearest_centroids(cb.centroids, pts) != oracle::nearest(cb.centroids, pts)) ++mismatched_sets;
    const auto& tr = cb.fit_meta.distortion_trace;
    for (std::size_t i = 1; i < tr.size(); ++i) {
      if (tr[i] > tr[i - 1] * (1.0 + 1e-12)) ++rising;
    }
  }
  Mat four(4, 2);
  four << 0, 0, 0, 1, 10, 10, 10, 11;
  KMeansOptions opts;
  opts.k = 2;
  const double dist = kmeans_fit(four, opts).fit_meta.final_distortion;
  return {mismatched_sets == 0 && rising == 0 && dist == 0.25,
          std::to_string(mismatched_sets) + "/20 sets differ from brute force, " + std::to_string(rising) +
              " distortion increases, 4-point distortion " + fmt(dist, 17)};
}

Outcome mfcc_oracle() {
  double worst = 0.0;
  Rng rng(21);
  for (int i = 0; i < 10; ++i) {
    AudioClip c;
    c.samples.resize(static_cast<std::size_t>(rng.uniform(0.3, 1.0) * 16000));
    const double f1 = rng.uniform(80.0, 7000.0);
    const double f2 = rng.uniform(80.0, 7000.0);
    for (std::size_t s = 0; s < c.samples.size(); ++s) {
      const double t = static_cast<double>(s) / 16000.0;
      c.samples[s] = static_cast<float>(0.4 * std::sin(2.0 * 3.141592653589793 * f1 * t) +
                                        0.2 * std::sin(2.0 * 3.141592653589793 * f2 * t) + 0.1 * rng.normal());
    }
    const Mat ref = oracle::mfcc39(c.samples);
    const Mat got = mfcc39(c).data;
    if (ref.rows() != got.rows() || ref.cols() != got.cols()) return {false, "shape mismatch on clip " + std::to_string(i)};
    worst = std::max(worst, (ref - got).cwiseAbs().maxCoeff());
  }
  AudioClip silence;
  silence.samples.assign(16000, 0.0f);
  const Mat s = mfcc39(silence).data;
  const bool zero_deltas = (s.rightCols(26).array() == 0.0).all();
  return {worst < 1e-3 && zero_deltas,
          "max abs deviation " + fmt(worst, 3) + ", silence deltas " + (zero_deltas ? "exactly zero" : "non-zero")};
}

Outcome pipeline_run(const Pipeline& a) {
  if (!a.ok) return {false, "pipeline run failed"};
  std::map<int, std::vector<double>> loss;
  std::istringstream log(slurp(work / "A" / "loss_log.jsonl"));
  std::string line;
  while (std::getline(log, line)) {
    const json j = json::parse(line);
    loss[j.at("stage").get<int>()].push_back(j.at("loss").get<double>());
  }
  const double lnk = std::log(100.0);
  bool pass = a.pretrain_seconds < 15 * 60;
  std::string detail = "pretrain " + fmt(a.pretrain_seconds, 4) + " s";
  for (int stage : {1, 2}) {
    const auto& l = loss[stage];
    if (l.size() != 200) return {false, "stage " + std::to_string(stage) + " logged " + std::to_string(l.size()) + " steps"};
    const double first = std::accumulate(l.begin(), l.begin() + 50, 0.0) / 50.0;
    const double last = std::accumulate(l.end() - 50, l.end(), 0.0) / 50.0;
    const bool finite = std::all_of(l.begin(), l.end(), [](double v) { return std::isfinite(v); });
    const bool near_lnk = std::abs(l.front() - lnk) <= 0.15 * lnk;
    pass = pass && finite && last < first && near_lnk;
    detail += "; stage " + std::to_string(stage) + " initial " + fmt(l.front(), 4) + " (ln k " + fmt(lnk, 4) +
              "), first-50 " + fmt(first, 4) + " -> final-50 " + fmt(last, 4);
  }
  return {pass, detail};
}

bool same_cnn(const CheckpointContainer& a, const CheckpointContainer& b) {
  bool same = true;
  int count = 0;
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind("model.cnn.", 0) != 0) continue;
    ++count;
    const auto it = b.tensors.find(name);
    same = same && it != b.tensors.end() && it->second.data == t.data && it->second.shape == t.shape;
  }
  return same && count > 0;
}

Outcome tone_finetune(const Pipeline& a) {
  if (!a.ok) return {false, "pipeline run failed"};
  const json report = json::parse(slurp(work / "A" / "ft_tones" / "report.json"));
  std::string detail;
  bool reached = false;
  for (const auto& run : report.at("runs")) {
    double best_valid = 0.0;
    double best_train = 0.0;
    for (const auto& e : run.at("epochs")) {
      const double tr = e.at("train_metric").get<double>();
      const double va = e.at("valid_metric").get<double>();
      best_train = std::max(best_train, tr);
      best_valid = std::max(best_valid, va);
      if (tr == 1.0 && va >= 0.9) reached = true;
    }
    detail += "lr " + fmt(run.at("lr").get<double>(), 3) + ": max train " + fmt(best_train, 3) + ", max valid " +
              fmt(best_valid, 3) + "; ";
  }
  const bool frozen = same_cnn(load_checkpoint(work / "A" / "stage2.avsc"), load_checkpoint(work / "A" / "ft_tones" / "model.avsc"));
  detail += std::string("CNN tensors ") + (frozen ? "bit-identical" : "CHANGED");
  return {reached && frozen, detail};
}

Outcome detection(const Pipeline& a) {
  if (!a.ok) return {false, "pipeline run failed"};
  if (cli("--config " + (work / "detect.cfg").string() + " finetune --checkpoint " + (work / "A" / "stage2.avsc").string() +
              " --manifest " + (work / "bursts/manifest.json").string() + " --out " + (work / "A" / "ft_bursts").string(),
          "finetune_bursts") != 0 ||
      cli("eval --checkpoint " + (work / "A" / "ft_bursts" / "model.avsc").string() + " --manifest " +
              (work / "bursts/manifest.json").string() + " --split test --out " + (work / "A" / "eval_bursts").string(),
          "eval_bursts") != 0) {
    return {false, "fine-tuning or evaluation failed"};
  }
  const double map = json::parse(slurp(work / "A" / "eval_bursts" / "eval.json")).at("value").get<double>();

  const EncoderModel model = get_model(load_checkpoint(work / "A" / "ft_bursts" / "model.avsc"));
  BurstSpec spec;
  const auto recs = synth_burst_recordings(1, spec, 999, "shape");
  bool shapes = true;
  std::string shape_detail;
  for (auto [win, hop] : {std::pair{1.0, 0.5}, {2.0, 1.0}, {1.5, 0.75}, {3.0, 1.0}, {0.8, 0.8}}) {
    const DetectionResult r = detect(model, recs[0].clip, win, hop);
    const auto expected = static_cast<Eigen::Index>(window(recs[0].clip, win, hop).size());
    shapes = shapes && r.scores.rows() == expected && r.scores.cols() == model.classifier->classes();
    shape_detail += std::to_string(r.scores.rows()) + "x" + std::to_string(r.scores.cols()) + " ";
  }
  return {map >= 0.9 && shapes, "held-out mAP " + fmt(map, 4) + "; detect shapes " + shape_detail};
}

Outcome metric_oracles() {
  Rng rng(5);
  double worst_ap = 0.0;
  int ap_cases = 0;
  while (ap_cases < 1000) {
    const std::size_t n = 1 + rng.below(80);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ap_cases % 3 == 0 ? std::floor(rng.uniform() * 6.0) / 6.0 : rng.uniform();
      y[i] = rng.uniform() < 0.35;
    }
    const double ref = oracle::average_precision(s, y);
    if (ref < 0) continue;
    const auto got = average_precision(s, y);
    worst_ap = std::max(worst_ap, got ? std::abs(*got - ref) : 1.0);
    ++ap_cases;
  }
  int acc_mismatch = 0;
  for (int c = 0; c < 200; ++c) {
    const std::size_t n = 1 + rng.below(500);
    std::vector<int> p(n);
    std::vector<int> g(n);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng.below(5));
      g[i] = static_cast<int>(rng.below(5));
      if (p[i] == g[i]) ++hits;
    }
    if (accuracy(p, g) != static_cast<double>(hits) / static_cast<double>(n)) ++acc_mismatch;
  }
  double worst_t = 0.0;
  for (int c = 0; c < 200; ++c) {
    Mat m(2 + static_cast<Eigen::Index>(rng.below(15)), 1 + static_cast<Eigen::Index>(rng.below(6)));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform();
    const Mat t = t_scores(m);
    for (Eigen::Index j = 0; j < t.cols(); ++j) {
      const double mean = t.col(j).mean();
      const double sd = std::sqrt((t.col(j).array() - mean).square().mean());
      worst_t = std::max({worst_t, std::abs(mean - 50.0), std::abs(sd - 10.0)});
    }
  }
  return {worst_ap <= 1e-9 && acc_mismatch == 0 && worst_t <= 1e-9,
          "AP max deviation " + fmt(worst_ap, 3) + " over 1000 cases, accuracy mismatches " +
              std::to_string(acc_mismatch) + ", t-score mean/std max deviation " + fmt(worst_t, 3)};
}

Outcome determinism(const Pipeline& a, const Pipeline& b) {
  if (!a.ok || !b.ok) return {false, "pipeline run failed"};
  std::string detail;
  bool pass = true;
  for (const char* f : {"stage1.avsc", "stage2.avsc", "ft_tones/model.avsc", "units_stage1.jsonl", "units_stage2.jsonl"}) {
    const bool same = slurp(work / "A" / f) == slurp(work / "B" / f);
    pass = pass && same;
    detail += std::string(f) + (same ? " identical; " : " DIFFERS; ");
  }
  bool forward_same = true;
  for (const char* f : {"stage2.avsc", "ft_tones/model.avsc"}) {
    const EncoderModel model = get_model(load_checkpoint(work / "A" / f));
    CheckpointContainer c;
    put_model(c, model);
    const EncoderModel back = get_model(deserialize(serialize(c)));
    for (std::uint64_t s = 0; s < 3; ++s) {
      const AudioClip clip = synth_tone(440.0 * static_cast<double>(s + 1), 1.0, 0.5, 0.0, 0.05, s);
      forward_same = forward_same && forward(model, clip).hidden.data == forward(back, clip).hidden.data;
      if (model.classifier) forward_same = forward_same && classify(model, clip) == classify(back, clip);
    }
  }
  detail += std::string("load(save(model)) forward ") + (forward_same ? "bit-identical" : "DIFFERS");
  return {pass && forward_same, detail};
}

struct Embeddings {
  Mat x;
  std::vector<int> labels;
};

Embeddings read_embeddings(const fs::path& csv) {
  std::istringstream in(slurp(csv));
  std::string line;
  std::getline(in, line);
  std::map<std::string, int> label_ids;
  std::vector<std::vector<double>> rows;
  Embeddings e;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::getline(ls, cell, ',');
    const auto [it, _] = label_ids.emplace(cell, static_cast<int>(label_ids.size()));
    e.labels.push_back(it->second);
    std::vector<double> r;
    while (std::getline(ls, cell, ',')) r.push_back(std::stod(cell));
    rows.push_back(std::move(r));
  }
  e.x = Mat(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) e.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return e;
}

Outcome clusterability(const Pipeline& a) {
  if (!a.ok) return {false, "pipeline run failed"};
  // Random-init model with the pretrained configuration and a fixed seed.
  const CheckpointContainer pre = load_checkpoint(work / "A" / "stage2.avsc");
  CheckpointContainer rnd;
  put_model(rnd, EncoderModel(model_config_from_json(pre.metadata.at("model")), 12345));
  save_checkpoint(work / "random_init.avsc", rnd);
  const std::string manifest = (work / "tones/manifest.json").string();
  if (cli("embed --checkpoint " + (work / "A" / "stage2.avsc").string() + " --manifest " + manifest + " --out " +
              (work / "emb_pretrained.csv").string(),
          "embed_pretrained") != 0 ||
      cli("embed --checkpoint " + (work / "random_init.avsc").string() + " --manifest " + manifest + " --out " +
              (work / "emb_random.csv").string(),
          "embed_random") != 0) {
    return {false, "embed failed"};
  }
  const Embeddings p = read_embeddings(work / "emb_pretrained.csv");
  const Embeddings r = read_embeddings(work / "emb_random.csv");
  const double sp = oracle::silhouette(p.x, p.labels);
  const double sr = oracle::silhouette(r.x, r.labels);
  return {sp > 0.0 && sp > sr, "silhouette pretrained " + fmt(sp, 4) + " vs random init " + fmt(sr, 4) + " (" +
                                   std::to_string(p.x.rows()) + " clips)"};
}

}  // namespace

int main(int argc, char** argv) {
  work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "bioenc_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  {
    std::ofstream cfg(work / "detect.cfg");
    cfg << "finetune.epochs = 20\n";
  }

  std::vector<std::pair<std::string, Outcome>> results;
  auto record = [&](const std::string& name, const Outcome& o) {
    results.emplace_back(name, o);
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  };

  record("1 gradient correctness", gradient_correctness());
  record("2 masked-only loss", masked_only_loss());
  record("3 cosine-softmax properties", cosine_softmax());
  record("4 k-means oracle equivalence", kmeans_oracle());
  record("5 MFCC oracle", mfcc_oracle());

  const bool data_ok = cli("synth --kind pretrain --out " + (work / "pre").string(), "synth_pre") == 0 &&
                       cli("synth --kind tones --out " + (work / "tones").string(), "synth_tones") == 0 &&
                       cli("synth --kind bursts --out " + (work / "bursts").string(), "synth_bursts") == 0;
  Pipeline a;
  Pipeline b;
  if (data_ok) {
    a = run_pipeline("A");
    b = run_pipeline("B");
  }
  record("6 two-stage pipeline", pipeline_run(a));
  record("7 tone classification fine-tuning", tone_finetune(a));
  record("8 burst detection", detection(a));
  record("9 metric oracles", metric_oracles());
  record("10 determinism and persistence", determinism(a, b));
  record("11 representation clusterability", clusterability(a));

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; });
  std::cout << (results.size() - static_cast<std::size_t>(failed)) << "/" << results.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}

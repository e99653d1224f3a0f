#include <iostream>

#include "CLI11.hpp"
#include "bioenc/cli.hpp"

int main(int argc, char** argv) {
  using namespace bioenc;
  CLI::App app{"bioenc: self-supervised audio encoder toolkit"};
  app.require_subcommand(1);

  GlobalOptions global;
  std::string config;
  app.add_option("--seed", global.seed, "Run seed")->capture_default_str();
  app.add_flag("--deterministic", global.deterministic, "Single-threaded, fixed-order execution");
  app.add_option("--config", config, "Key-value config file");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset and manifest");
  s->add_option("--kind", synth.kind, "pretrain | tones | bursts")->capture_default_str();
  s->add_option("--out", synth.out_dir, "Output directory")->required();
  s->add_option("--clips", synth.clips, "Clips (pretrain)")->capture_default_str();
  s->add_option("--clip-seconds", synth.clip_s, "Clip length (pretrain)")->capture_default_str();
  s->add_option("--per-class-train", synth.per_class_train)->capture_default_str();
  s->add_option("--per-class-valid", synth.per_class_valid)->capture_default_str();
  s->add_option("--per-class-test", synth.per_class_test)->capture_default_str();
  s->add_option("--recordings-train", synth.recordings_train)->capture_default_str();
  s->add_option("--recordings-valid", synth.recordings_valid)->capture_default_str();
  s->add_option("--recordings-test", synth.recordings_test)->capture_default_str();

  PretrainArgs pre;
  std::string stage = "all";
  std::string init;
  auto* p = app.add_subcommand("pretrain", "Two-stage masked unit-prediction pretraining");
  p->add_option("--manifest", pre.manifest, "Dataset manifest")->required();
  p->add_option("--out", pre.out_dir, "Output directory")->required();
  p->add_option("--stage", stage, "all | 1-only")->check(CLI::IsMember({"all", "1-only"}))->capture_default_str();
  p->add_option("--init", init, "Stage-2 initialization: fresh | continue")->check(CLI::IsMember({"fresh", "continue"}));

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Fine-tune a classifier head with an lr sweep");
  f->add_option("--checkpoint", ft.checkpoint, "Pretrained checkpoint")->required();
  f->add_option("--manifest", ft.manifest, "Labeled manifest")->required();
  f->add_option("--out", ft.out_dir, "Output directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a fine-tuned model on a split");
  e->add_option("--checkpoint", ev.checkpoint, "Fine-tuned checkpoint")->required();
  e->add_option("--manifest", ev.manifest, "Labeled manifest")->required();
  e->add_option("--out", ev.out_dir, "Output directory")->required();
  e->add_option("--split", ev.split, "train | valid | test")->capture_default_str();
  e->add_option("--name", ev.model_name, "Model name for the CSV row");

  DetectArgs det;
  double win = 0.0;
  double hop = 0.0;
  double threshold = 0.0;
  auto* d = app.add_subcommand("detect", "Sliding-window detection on one recording");
  d->add_option("--checkpoint", det.checkpoint, "Fine-tuned detection checkpoint")->required();
  d->add_option("--audio", det.audio, "WAV file")->required();
  d->add_option("--out", det.out, "Output JSON")->required();
  auto* win_opt = d->add_option("--window", win, "Window seconds");
  auto* hop_opt = d->add_option("--hop", hop, "Hop seconds");
  auto* thr_opt = d->add_option("--threshold", threshold, "Score threshold");

  EmbedArgs emb;
  auto* m = app.add_subcommand("embed", "Export mean-pooled embeddings");
  m->add_option("--checkpoint", emb.checkpoint, "Checkpoint")->required();
  m->add_option("--manifest", emb.manifest, "Manifest")->required();
  m->add_option("--out", emb.out, "Output .csv or .jsonl")->required();

  TscoreArgs ts;
  auto* t = app.add_subcommand("tscore", "Relative T-scores over metric tables");
  t->add_option("inputs", ts.inputs, "Metric CSVs (model rows, dataset columns)")->required();
  t->add_option("--out", ts.out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    return app.exit(ex) == 0 ? 0 : 1;
  }
  if (!config.empty()) global.config = config;

  return run_guarded([&] {
    if (*s) cmd_synth(global, synth);
    if (*p) {
      pre.stage1_only = stage == "1-only";
      if (!init.empty()) pre.init = init;
      cmd_pretrain(global, pre);
    }
    if (*f) cmd_finetune(global, ft);
    if (*e) cmd_eval(global, ev);
    if (*d) {
      if (*win_opt) det.window_s = win;
      if (*hop_opt) det.hop_s = hop;
      if (*thr_opt) det.threshold = threshold;
      cmd_detect(global, det);
    }
    if (*m) cmd_embed(global, emb);
    if (*t) cmd_tscore(global, ts);
  });
}

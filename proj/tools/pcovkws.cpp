// pcovkws: toy corpus generation, training, evaluation, enrollment,
// detection and model profiling.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "pcovkws/commands.hpp"

int main(int argc, char** argv) {
  using namespace pcovkws;
  CLI::App app{"Personalized open-vocabulary keyword spotting"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOptions g;
  std::uint64_t seed = 0;
  std::string config, precision;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides the config file)");
  auto* config_opt = app.add_option("--config", config, "JSON training config")->check(CLI::ExistingFile);
  app.add_option("--threads", g.threads, "Worker threads for feature extraction and scoring")
      ->check(CLI::Range(1u, 1024u));
  auto* precision_opt =
      app.add_option("--precision", precision, "Arithmetic precision")->check(CLI::IsMember({"f32", "f64"}));

  GenToyArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-toy-corpus", "Write a synthetic corpus and its manifest");
  gen_cmd->add_option("--out", gen.out_dir, "Output directory")->required();
  gen_cmd->add_option("--keywords", gen.n_keywords, "Number of keywords")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--speakers", gen.n_speakers, "Number of speakers")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--utts", gen.n_utts, "Utterances per (keyword, speaker) cell")->check(CLI::PositiveNumber);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train encoder, heads and classifier banks");
  train_cmd->add_option("--manifest", train.manifest, "Manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Output checkpoint")->required();
  train_cmd->add_option("--log", train.log, "Per-step CSV log (default <out>.log.csv)");
  train_cmd->add_option("--weighting", train.weighting, "Override loss weighting")
      ->check(CLI::IsMember({"pcgrad", "ew"}));
  train_cmd->add_option("--max-steps", train.max_steps, "Stop after this many steps (0 = no cap)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Score trial pairs and report EER / AUC");
  eval_cmd->add_option("--manifest", ev.manifest, "Manifest (JSON lines)")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--task", ev.task, "Evaluation task")->check(CLI::IsMember({"ovkws", "sv", "pcov", "ckws"}));
  eval_cmd->add_option("--pairs", ev.n_pairs, "Number of trial pairs")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--enroll", ev.n_enroll, "Enrollment utterances per pair")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--alpha", ev.alpha, "Fusion weight (pcov: skips the validation search)");
  eval_cmd->add_option("--preset", ev.preset, "Fusion preset")->check(CLI::IsMember({"pcov", "ovkws", "sv"}));
  eval_cmd->add_option("--det", ev.det_csv, "DET curve CSV (default <checkpoint>.<task>.det.csv)");
  eval_cmd->add_option("--split", ev.split, "Manifest split to score")->check(CLI::IsMember({"train", "valid", "test"}));

  EnrollArgs en;
  auto* enroll_cmd = app.add_subcommand("enroll", "Register a user profile from example utterances");
  enroll_cmd->add_option("--checkpoint", en.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  enroll_cmd->add_option("--profile", en.profile, "Profile name")->required();
  enroll_cmd->add_option("--out", en.out, "Write the updated checkpoint here instead of in place");
  enroll_cmd->add_option("wavs", en.wavs, "Enrollment WAV files")->required()->check(CLI::ExistingFile);

  DetectArgs det;
  auto* detect_cmd = app.add_subcommand("detect", "Score one utterance against an enrolled profile");
  detect_cmd->add_option("--checkpoint", det.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  detect_cmd->add_option("--profile", det.profile, "Profile name")->required();
  detect_cmd->add_option("--wav", det.wav, "Test WAV")->required()->check(CLI::ExistingFile);
  detect_cmd->add_option("--task", det.task, "Decision task")->check(CLI::IsMember({"pcov", "ovkws", "sv"}));
  detect_cmd->add_option("--alpha", det.alpha, "Fusion weight override");
  detect_cmd->add_option("--threshold", det.threshold, "Accept iff fused confidence >= threshold");

  auto* profile_cmd = app.add_subcommand("profile", "Report parameter and FLOP counts per layer");

  std::string sc_root, sc_out;
  auto* sc_cmd = app.add_subcommand("import-speech-commands", "Build a manifest for a Speech Commands directory");
  sc_cmd->add_option("--root", sc_root, "Dataset root")->required()->check(CLI::ExistingDirectory);
  sc_cmd->add_option("--out", sc_out, "Manifest to write")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*seed_opt) g.seed = seed;
    if (*config_opt) g.config = config;
    if (*precision_opt) g.precision = parse_precision(precision);
    if (*gen_cmd) return cmd_gen_toy_corpus(g, gen, std::cout);
    if (*train_cmd) return cmd_train(g, train, std::cout);
    if (*eval_cmd) return cmd_eval(g, ev, std::cout);
    if (*enroll_cmd) return cmd_enroll(g, en, std::cout);
    if (*detect_cmd) return cmd_detect(g, det, std::cout);
    if (*profile_cmd) return cmd_profile(g, std::cout);
    if (*sc_cmd) return cmd_import_speech_commands(sc_root, sc_out, std::cout);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}

// qkvae: synthetic data, training, generation, transfer, interpolation and
// evaluation from the command line.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "qkvae/qkvae.hpp"

namespace fs = std::filesystem;
using namespace qkvae;

namespace {

constexpr const char* kFormats = R"(File formats (UTF-8):
  corpus       one sentence per line            the dog chases the cat .
  triplets     target<TAB>sem_src<TAB>syn_src   the cat is chased by the dog .<TAB>the dog chases the cat .<TAB>the ball is kicked by the boy .
  labels       sentence<TAB>template_id<TAB>content (joined by |)
                                                the dog chases the cat .<TAB>0<TAB>dog|chase|cat
  trees        one bracketed parse per line     (S (NP (DT the) (NN dog)) (VP (VBZ chases) (NP (DT the) (NN cat))) (. .))
  config       key=value per line, # comments   beta_sem_final=0.6
  metrics      step nll kl_sem kl_syn beta_sem beta_syn wall_ms (tab-separated, header line first)
  similarity   id_a<TAB>id_b<TAB>score          s1<TAB>s2<TAB>0.83
  synth spec   seed N | slot NAME f/f/f ... | template NAME (TREE with {slot} or {slot.form} leaves)
               template active (S (NP (DT the) (NN {agent})) (VP (VBZ {verb.1}) (NP (DT the) (NN {patient}))) (. .))
  checkpoint   binary: "QKVAE\0", u16 version, config entries, f32 tensor table; vocab.txt sits next to it)";

struct Loaded {
  TrainState state;
  Vocab vocab;
};

Loaded load_model(const std::string& ckpt, const std::string& vocab_path) {
  if (!fs::exists(ckpt)) throw DataError("checkpoint " + ckpt + " does not exist");
  const std::string vp = vocab_path.empty() ? (fs::path(ckpt).parent_path() / "vocab.txt").string() : vocab_path;
  if (!fs::exists(vp)) throw DataError("vocabulary " + vp + " not found (pass --vocab)");
  Loaded l{load_checkpoint(ckpt), Vocab::load(vp)};
  if (l.vocab.size() != l.state.cfg.model.vocab_size)
    throw DataError("vocabulary " + vp + " has " + std::to_string(l.vocab.size()) + " tokens, checkpoint expects " +
                    std::to_string(l.state.cfg.model.vocab_size));
  return l;
}

TokenSeq to_tokens(const Vocab& vocab, const std::string& sentence, std::size_t max_len) {
  TokenSeq t = vocab.tokenize(sentence);
  if (t.empty()) throw DataError("empty sentence");
  if (t.size() > max_len)
    throw DataError("sentence has " + std::to_string(t.size()) + " tokens, the model accepts at most " +
                    std::to_string(max_len));
  return t;
}

DecodeStrategy parse_strategy(const std::string& s) {
  if (s == "greedy") return DecodeStrategy::greedy();
  if (s.rfind("sample:", 0) == 0) {
    const std::string rest = s.substr(7);
    const auto colon = rest.find(':');
    try {
      std::size_t used = 0;
      const double t = std::stod(rest.substr(0, colon), &used);
      if (used != rest.substr(0, colon).size() || !(t > 0)) throw std::invalid_argument("temperature");
      std::uint64_t seed = 0;
      if (colon != std::string::npos) {
        const std::string ss = rest.substr(colon + 1);
        seed = std::stoull(ss, &used);
        if (used != ss.size()) throw std::invalid_argument("seed");
      }
      return DecodeStrategy::sample(t, seed);
    } catch (const std::exception&) {
    }
  }
  throw UsageError("--strategy must be greedy or sample:T:SEED with T > 0, got '" + s + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& spec_path, std::size_t n, std::size_t n_test, std::size_t n_dev, const std::string& out) {
  SynthSpec spec = SynthSpec::default_spec();
  if (!spec_path.empty() && spec_path != "default") spec = SynthSpec::parse(read_file(spec_path));
  const SynthCorpus c = gen_synthetic(spec, n, n_test + n_dev);
  ensure_dir(out);
  const SynthGrammar g(spec);
  std::ofstream corpus(fs::path(out) / "corpus.txt"), labels(fs::path(out) / "labels.tsv"),
      trees(fs::path(out) / "trees.txt");
  auto tree_line = [&](const SynthSentence& s) { trees << to_bracketed(s.tree) << '\n'; };
  for (const auto& s : c.sentences) {
    corpus << s.text << '\n';
    labels << s.text << '\t' << s.template_id << '\t' << g.content_label(s.content) << '\n';
    tree_line(s);
  }
  std::vector<TripletRecord> test, dev;
  for (std::size_t i = 0; i < c.triplets.size(); ++i) {
    const auto& t = c.triplets[i];
    (i < n_test ? test : dev).push_back({t.target.text, t.sem_src.text, t.syn_src.text});
    for (const auto* s : {&t.target, &t.sem_src, &t.syn_src}) tree_line(*s);
  }
  write_triplets((fs::path(out) / "triplets.tsv").string(), test);
  write_triplets((fs::path(out) / "dev_triplets.tsv").string(), dev);
  std::ofstream(fs::path(out) / "spec.txt") << spec.to_text();
  if (!corpus || !labels || !trees) throw DataError("short write under " + out);
  std::printf("wrote %zu sentences, %zu test and %zu dev triplets to %s\n", c.sentences.size(), test.size(), dev.size(),
              out.c_str());
  return 0;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out, const std::string& resume) {
  TrainConfig cfg = load_train_config(config);
  const std::vector<std::string> text = load_corpus(data);
  if (text.empty()) throw DataError(data + " holds no sentences");
  std::optional<TrainState> state;
  Vocab vocab;
  if (!resume.empty()) {
    Loaded l = load_model(resume, "");
    const ModelConfig saved = l.state.cfg.model;
    ModelConfig want = cfg.model;
    want.vocab_size = saved.vocab_size;
    if (want.entries() != saved.entries()) throw UsageError("--config model settings differ from the checkpoint's");
    const TrainConfig old = l.state.cfg;
    cfg.model = saved;
    if (cfg.seed != old.seed || cfg.batch_size != old.batch_size)
      throw UsageError("seed and batch_size must match the checkpoint to resume deterministically");
    l.state.cfg = cfg;
    state = std::move(l.state);
    vocab = std::move(l.vocab);
  } else {
    vocab = Vocab::build(text);
    cfg.model.vocab_size = vocab.size();
  }
  cfg.validate();
  std::vector<TokenSeq> seqs;
  for (std::size_t i = 0; i < text.size(); ++i) {
    TokenSeq t = vocab.tokenize(text[i]);
    if (t.empty()) throw DataError(data + ":" + std::to_string(i + 1) + ": sentence has no tokens");
    if (t.size() > cfg.model.max_len)
      throw DataError(data + ":" + std::to_string(i + 1) + ": " + std::to_string(t.size()) + " tokens exceed max_len " +
                      std::to_string(cfg.model.max_len));
    seqs.push_back(std::move(t));
  }
  ensure_dir(out);
  vocab.save((fs::path(out) / "vocab.txt").string());
  Trainer trainer = state ? Trainer(std::move(*state), seqs) : Trainer::fresh(cfg, seqs);
  const fs::path metrics_path = fs::path(out) / "metrics.tsv";
  const bool append = state.has_value() && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  if (!append) metrics << kMetricHeader << '\n';
  const std::string ckpt = (fs::path(out) / "checkpoint.bin").string();
  std::printf("training %zu parameters on %zu sentences for %lld steps (from step %lld)\n",
              trainer.state().model.parameter_count(), seqs.size(), static_cast<long long>(trainer.total_steps()),
              static_cast<long long>(trainer.step()));
  trainer.run(-1,
              [&](const StepMetrics& m) {
                metrics << format_metrics(m) << '\n';
                if (m.step % 100 == 0) {
                  metrics.flush();
                  std::printf("step %lld nll %.4f kl_sem %.3f kl_syn %.3f\n", static_cast<long long>(m.step), m.nll,
                              m.kl_sem, m.kl_syn);
                  std::fflush(stdout);
                }
              },
              ckpt);
  std::printf("saved %s\n", ckpt.c_str());
  return 0;
}

int cmd_generate(const std::string& ckpt, const std::string& vocab_path, const std::string& prompt,
                 const std::string& strategy_s, std::size_t n, std::uint64_t seed, std::size_t max_len) {
  const DecodeStrategy strategy = parse_strategy(strategy_s);
  if (prompt != "prior" && prompt.rfind("encode:", 0) != 0)
    throw UsageError("--prompt-latents must be prior or encode:SENTENCE");
  if (n == 0) throw UsageError("--n must be >= 1");
  const Loaded l = load_model(ckpt, vocab_path);
  const auto& model = l.state.model;
  const auto& mc = model.config();
  LatentCode<float> z;
  if (prompt == "prior") {
    Rng rng(seed);
    z.sem = Tensor<float>::randn({n, mc.latents, mc.d_sem / mc.latents}, rng);
    if (mc.mode == ModelMode::kQkvae) z.syn = Tensor<float>::randn({n, mc.d_syn}, rng);
  } else {
    const TokenSeq t = to_tokens(l.vocab, prompt.substr(7), mc.max_len);
    const std::vector<TokenSeq> many(n, t);
    z = model.means(model.encode(make_batch(many, mc.max_len)));
  }
  for (const auto& s : model.generate(z, strategy, max_len == 0 ? mc.max_len : max_len))
    std::printf("%s\n", l.vocab.detokenize(s).c_str());
  return 0;
}

int cmd_transfer(const std::string& ckpt, const std::string& vocab_path, const std::string& sem, const std::string& syn,
                 std::size_t syn_slot) {
  const Loaded l = load_model(ckpt, vocab_path);
  const auto& model = l.state.model;
  const std::vector<TokenSeq> a{to_tokens(l.vocab, sem, model.config().max_len)};
  const std::vector<TokenSeq> b{to_tokens(l.vocab, syn, model.config().max_len)};
  std::vector<TokenSeq> out;
  if (model.config().mode == ModelMode::kQkvae) {
    out = transfer(model, std::span<const TokenSeq>(a), std::span<const TokenSeq>(b));
  } else {
    if (syn_slot == 0) throw UsageError("ADVAE checkpoints need --syn-slot");
    out = advae_transfer(model, std::span<const TokenSeq>(a), std::span<const TokenSeq>(b), syn_slot);
  }
  std::printf("%s\n", l.vocab.detokenize(out.front()).c_str());
  return 0;
}

int cmd_interpolate(const std::string& ckpt, const std::string& vocab_path, const std::string& a, const std::string& b,
                    std::size_t steps) {
  if (steps < 2) throw UsageError("--steps must be >= 2");
  const Loaded l = load_model(ckpt, vocab_path);
  const auto& model = l.state.model;
  const auto out = interpolate(model, to_tokens(l.vocab, a, model.config().max_len),
                               to_tokens(l.vocab, b, model.config().max_len), steps);
  for (std::size_t k = 0; k < out.size(); ++k)
    std::printf("%.4f\t%s\n", static_cast<double>(k) / static_cast<double>(steps - 1), l.vocab.detokenize(out[k]).c_str());
  return 0;
}

int cmd_eval_separation(const std::string& ckpt, const std::string& vocab_path, const std::string& triplets_path,
                        const std::string& variable, const std::string& metric_s, bool header) {
  const Metric metric = parse_metric(metric_s);
  const Loaded l = load_model(ckpt, vocab_path);
  const auto& model = l.state.model;
  const std::vector<TripletRecord> triplets = load_triplets(triplets_path, header);
  if (triplets.empty()) throw DataError(triplets_path + " holds no triplets");
  const EmbeddingCache<float> cache(model, l.vocab, triplet_sentences(triplets));
  if (variable == "auto") {
    std::vector<double> probs;
    for (std::size_t s = 1; s <= model.config().latents; ++s) {
      const VariableTag tag{VariableTag::Kind::kSlot, s};
      probs.push_back(separation_probability(
          std::span<const TripletRecord>(triplets), [&](const std::string& x) { return cache(x, tag); }, metric));
      std::printf("z%zu\t%.4f\n", s, probs.back());
    }
    const SlotSelection sel = select_advae_variables(probs);
    std::printf("sem_slot\tz%zu\nsyn_slot\tz%zu\n", sel.sem_slot, sel.syn_slot);
    if (sel.tie) std::fprintf(stderr, "warning: every slot scored the same; slot choice is arbitrary\n");
    return 0;
  }
  const VariableTag tag = VariableTag::parse(variable, model.config().latents);
  const double p = separation_probability(
      std::span<const TripletRecord>(triplets), [&](const std::string& x) { return cache(x, tag); }, metric);
  std::printf("%s\t%s\t%.6f\n", tag.name().c_str(), metric_s.c_str(), p);
  return 0;
}

int cmd_eval_transfer(const std::string& ckpt, const std::string& vocab_path, const std::string& triplets_path,
                      const std::string& trees_path, const std::string& spec_path, const std::string& out,
                      std::size_t syn_slot, bool header) {
  const Loaded l = load_model(ckpt, vocab_path);
  const auto& model = l.state.model;
  const std::size_t max_len = model.config().max_len;
  const std::vector<TripletRecord> triplets = load_triplets(triplets_path, header);
  TreeLookup trees(load_trees(trees_path));
  if (!spec_path.empty())
    trees.set_grammar(SynthGrammar(spec_path == "default" ? SynthSpec::default_spec() : SynthSpec::parse(read_file(spec_path))));
  std::vector<TokenSeq> sem, syn;
  for (const auto& t : triplets) {
    sem.push_back(to_tokens(l.vocab, t.sem_src, max_len));
    syn.push_back(to_tokens(l.vocab, t.syn_src, max_len));
  }
  std::vector<TransferCase> cases;
  for (std::size_t begin = 0; begin < triplets.size(); begin += 64) {
    const std::size_t n = std::min<std::size_t>(64, triplets.size() - begin);
    const std::span<const TokenSeq> a(sem.data() + begin, n), b(syn.data() + begin, n);
    std::vector<TokenSeq> outs;
    if (model.config().mode == ModelMode::kQkvae) {
      outs = transfer(model, a, b);
    } else {
      if (syn_slot == 0) throw UsageError("ADVAE checkpoints need --syn-slot");
      outs = advae_transfer(model, a, b, syn_slot);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = triplets[begin + i];
      TransferCase c{t.sem_src, t.syn_src, t.target, l.vocab.detokenize(outs[i]), {}, {}, {}};
      score_transfer(c, trees);
      cases.push_back(std::move(c));
    }
  }
  const std::string report = transfer_report(cases);
  if (out.empty()) {
    std::fputs(report.c_str(), stdout);
  } else {
    ensure_dir(out);
    const std::string path = (fs::path(out) / "transfer_report.tsv").string();
    write_file_atomic(path, report);
    const TransferSummary s = summarize_transfer(cases);
    std::printf("parsed %zu/%zu  syn_src: STED %.2f TMA2 %.1f TMA3 %.1f  (report: %s)\n", s.parsed, s.cases, s.sted[1],
                s.tma2[1], s.tma3[1], path.c_str());
  }
  return 0;
}

int cmd_grad_check(std::size_t size, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw UsageError("--trials must be >= 1");
  double worst = 0;
  std::size_t coords = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const GradCheckReport r = elbo_grad_check(size, seed + t);
    if (!r.failure.empty()) throw NumericalError("trial " + std::to_string(t) + ": " + r.failure);
    worst = std::max(worst, r.max_rel_error);
    coords += r.coordinates;
  }
  std::printf("trials %zu  coordinates %zu  max relative error %.3e\n", trials, coords, worst);
  if (worst > 1e-3) {
    std::fprintf(stderr, "gradient check failed: %.3e > 1e-3\n", worst);
    return 3;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"QKVAE: a Transformer VAE whose keys come from z_syn and values from z_sem."};
  app.footer(kFormats);
  app.require_subcommand(1);

  std::string spec, out, config, data, resume, ckpt, vocab, prompt = "prior", strategy = "greedy", sem, syn, a, b,
                                                        triplets, variable = "sem", metric = "l2", trees;
  std::size_t n = 5000, n_test = 500, n_dev = 200, steps = 5, size = 8, trials = 100, syn_slot = 0, max_len = 0, count = 1;
  std::uint64_t seed = 0;
  bool header = false;

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic corpus with labels, trees and triplets");
  synth->add_option("--spec", spec, "Grammar spec file, or 'default'");
  synth->add_option("--n", n, "Corpus sentences")->check(CLI::PositiveNumber);
  synth->add_option("--triplets", n_test, "Held-out test triplets");
  synth->add_option("--dev-triplets", n_dev, "Held-out dev triplets");
  synth->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train a model; writes vocab.txt, metrics.tsv, checkpoint.bin");
  train->add_option("--config", config, "key=value config file")->required();
  train->add_option("--data", data, "Corpus, one sentence per line")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* gen = app.add_subcommand("generate", "Decode sentences from latent codes");
  gen->add_option("--ckpt", ckpt)->required();
  gen->add_option("--vocab", vocab, "Defaults to vocab.txt beside the checkpoint");
  gen->add_option("--prompt-latents", prompt, "prior | encode:SENTENCE");
  gen->add_option("--strategy", strategy, "greedy | sample:T:SEED");
  gen->add_option("--n", count, "Number of sentences");
  gen->add_option("--seed", seed, "Prior sampling seed");
  gen->add_option("--max-len", max_len, "Token cap (default: model max_len)");

  auto* tr = app.add_subcommand("transfer", "Decode z_sem of --sem with z_syn of --syn");
  tr->add_option("--ckpt", ckpt)->required();
  tr->add_option("--vocab", vocab);
  tr->add_option("--sem", sem)->required();
  tr->add_option("--syn", syn)->required();
  tr->add_option("--syn-slot", syn_slot, "ADVAE only: latent slot (1-based) taken from --syn");

  auto* interp = app.add_subcommand("interpolate", "Decode a homotopy between two sentences");
  interp->add_option("--ckpt", ckpt)->required();
  interp->add_option("--vocab", vocab);
  interp->add_option("--a", a)->required();
  interp->add_option("--b", b)->required();
  interp->add_option("--steps", steps, "Points including both ends (>= 2)");

  auto* sep = app.add_subcommand("eval-separation", "Probability that target is closer to sem_src than syn_src");
  sep->add_option("--ckpt", ckpt)->required();
  sep->add_option("--vocab", vocab);
  sep->add_option("--triplets", triplets)->required();
  sep->add_option("--variable", variable, "sem | syn | whole | z1..zL | auto (ADVAE slot selection)");
  sep->add_option("--metric", metric, "l2 | cosine");
  sep->add_flag("--header", header, "Skip the first triplet line");

  auto* evt = app.add_subcommand("eval-transfer", "Transfer every triplet and score syntax against references");
  evt->add_option("--ckpt", ckpt)->required();
  evt->add_option("--vocab", vocab);
  evt->add_option("--triplets", triplets)->required();
  evt->add_option("--trees", trees, "Parses of the references and outputs")->required();
  evt->add_option("--spec", spec, "Synthetic grammar for parsing outputs, or 'default'");
  evt->add_option("--out", out, "Directory for transfer_report.tsv (default: stdout)");
  evt->add_option("--syn-slot", syn_slot, "ADVAE only: latent slot (1-based) taken from syn_src");
  evt->add_flag("--header", header, "Skip the first triplet line");

  auto* gc = app.add_subcommand("grad-check", "64-bit finite-difference check of the full objective");
  gc->add_option("--size", size, "Tiny model width d_model (even)");
  gc->add_option("--trials", trials, "Random models/batches");
  gc->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*synth) return cmd_synth(spec, n, n_test, n_dev, out);
    if (*train) return cmd_train(config, data, out, resume);
    if (*gen) return cmd_generate(ckpt, vocab, prompt, strategy, count, seed, max_len);
    if (*tr) return cmd_transfer(ckpt, vocab, sem, syn, syn_slot);
    if (*interp) return cmd_interpolate(ckpt, vocab, a, b, steps);
    if (*sep) return cmd_eval_separation(ckpt, vocab, triplets, variable, metric, header);
    if (*evt) return cmd_eval_transfer(ckpt, vocab, triplets, trees, spec, out, syn_slot, header);
    if (*gc) return cmd_grad_check(size, trials, seed);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const NumericalError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  }
  return 1;
}

// im2sp: command-line driver for the image-to-speech-unit pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <im2sp/im2sp.hpp>

namespace fs = std::filesystem;
using namespace im2sp;

namespace {

enum exit_code { ok = 0, usage = 1, data = 2, numeric = 3 };

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags that mirror key=value config entries; a given flag overrides the file.
class overrides {
public:
  void add(CLI::App &app, const std::string &key, const std::string &help) {
    std::string flag = "--" + key;
    for (char &ch : flag)
      if (ch == '_')
        ch = '-';
    opts_[key] = app.add_option(flag, values_[key], help);
  }

  kv_config resolve(const std::string &config_path) const {
    kv_config kv = config_path.empty() ? kv_config{} : kv_config::load(config_path);
    for (const auto &[key, opt] : opts_)
      if (opt->count() > 0)
        kv.set(key, values_.at(key));
    return kv;
  }

private:
  std::map<std::string, std::string> values_;
  std::map<std::string, CLI::Option *> opts_;
};

void add_model_flags(CLI::App &app, overrides &o) {
  for (const char *key : {"d_model", "n_layers", "n_heads", "ff_dim", "grid_h", "grid_w", "max_unit_len", "unit_vocab",
                          "text_vocab", "image_vocab", "dropout", "seed"})
    o.add(app, key, "model setting (overrides --config)");
  for (const char *key : {"lr", "warmup_steps", "steps", "batch_size", "train_seed", "clip_norm"})
    o.add(app, key, "training setting (overrides --config)");
}

bool is_manifest(const std::string &path) { return fs::path(path).extension() == ".tsv"; }

void ensure_dir(const std::string &dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw format_error("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string &dir, const std::string &name) { return (fs::path(dir) / name).string(); }

// ---------------------------------------------------------------------------
// gen-data

struct gen_args {
  std::uint64_t seed = 0;
  std::size_t n = 64;
  std::string out;
  double noise_fraction = 0.1;
  std::vector<double> split;
  std::uint64_t split_seed = 0;
};

void write_items(const std::string &path, const std::vector<corpus_entry> &all, const std::vector<std::size_t> &idx) {
  std::vector<corpus_entry> part;
  for (std::size_t i : idx)
    part.push_back(all[i]);
  write_corpus_manifest(path, part);
}

int run_gen_data(const gen_args &a) {
  gen_options opt;
  opt.seed = a.seed;
  opt.n_items = a.n;
  opt.noise_fraction = a.noise_fraction;
  const auto c = gen_corpus(opt);
  for (const char *sub : {"images", "units", "features"})
    ensure_dir(join(a.out, sub));
  std::vector<corpus_entry> entries;
  for (const auto &item : c.items) {
    char id[32];
    std::snprintf(id, sizeof id, "item%05zu", item.id);
    corpus_entry e{id, "images/" + std::string(id) + ".ppm", caption_text(item.words),
                   "units/" + std::string(id) + ".ucu", "features/" + std::string(id) + ".ufm"};
    save_pnm(join(a.out, e.image), item.picture);
    save_units(join(a.out, e.units), item.units);
    save_features(join(a.out, e.features), item.features);
    entries.push_back(std::move(e));
  }
  write_corpus_manifest(join(a.out, "corpus.tsv"), entries);
  save_codebook(join(a.out, "generating_codebook.ucb"), c.speech_codebook);
  if (!a.split.empty()) {
    if (a.split.size() != 3)
      throw usage_error("--split needs three fractions: train,val,test");
    const auto s = split(entries.size(), {a.split[0], a.split[1], a.split[2]}, a.split_seed);
    write_items(join(a.out, "train.tsv"), entries, s.train);
    write_items(join(a.out, "val.tsv"), entries, s.val);
    write_items(join(a.out, "test.tsv"), entries, s.test);
  }
  std::cout << "items=" << entries.size() << "\nmanifest=" << join(a.out, "corpus.tsv") << "\n";
  return ok;
}

// ---------------------------------------------------------------------------
// train-codebook / encode

struct codebook_args {
  std::string modality;
  std::size_t k = 0;
  std::string in, out;
  std::uint64_t seed = 0;
  std::size_t patch = default_patch_size;
  std::size_t max_iters = default_kmeans_iters;
  std::size_t restarts = 1;
};

int run_train_codebook(const codebook_args &a) {
  const auto entries = read_corpus_manifest(a.in);
  if (entries.empty())
    throw format_error(a.in + ": no entries");
  kmeans_result r{codebook(matrix(1, 1)), {}, 0, false};
  if (a.modality == "image") {
    std::vector<image> pictures;
    for (const auto &e : entries)
      pictures.push_back(load_pnm(e.image));
    r = fit_image_codebook(pictures, a.k, a.patch, a.seed, a.max_iters, default_kmeans_tol, a.restarts);
  } else {
    std::vector<float> pooled;
    std::size_t rows = 0, dim = 0;
    for (const auto &e : entries) {
      const auto f = load_features(e.features);
      if (f.length() == 0)
        continue;
      if (rows == 0)
        dim = f.dim();
      else if (f.dim() != dim)
        throw format_error(e.features + ": feature dim " + std::to_string(f.dim()) + " differs from " +
                           std::to_string(dim));
      pooled.insert(pooled.end(), f.frames().data.begin(), f.frames().data.end());
      rows += f.length();
    }
    r = kmeans_fit_best(matrix(rows, dim, std::move(pooled)), a.k, a.seed, a.restarts, a.max_iters);
  }
  save_codebook(a.out, r.centroids);
  std::printf("k=%zu\ndim=%zu\niterations=%zu\nconverged=%d\ninertia=%.6f\n", r.centroids.size(), r.centroids.dim(),
              r.iterations, r.converged ? 1 : 0, r.inertia_trace.back());
  return ok;
}

struct encode_args {
  std::string modality, codebook_path, in, out;
  bool no_dedup = false;
  std::size_t patch = default_patch_size;
};

unit_sequence encode_speech_file(const std::string &path, const codebook &cb, bool dedup_units) {
  const auto f = load_features(path);
  return dedup_units ? encode_speech(f, cb) : assign(cb, f);
}

int run_encode(const encode_args &a) {
  const auto cb = load_codebook(a.codebook_path);
  const bool image_mode = a.modality == "image";
  if (!is_manifest(a.in)) {
    if (image_mode)
      save_grid(a.out, encode_image(load_pnm(a.in), cb, a.patch));
    else
      save_units(a.out, encode_speech_file(a.in, cb, !a.no_dedup));
    return ok;
  }
  ensure_dir(a.out);
  std::vector<unit_entry> written;
  for (const auto &e : read_corpus_manifest(a.in)) {
    const std::string name = e.id + ".ucu";
    if (image_mode)
      save_grid(join(a.out, name), encode_image(load_pnm(e.image), cb, a.patch));
    else
      save_units(join(a.out, name), encode_speech_file(e.features, cb, !a.no_dedup));
    written.push_back({e.id, name});
  }
  write_unit_manifest(join(a.out, "manifest.tsv"), written);
  std::cout << "encoded=" << written.size() << "\nmanifest=" << join(a.out, "manifest.tsv") << "\n";
  return ok;
}

// ---------------------------------------------------------------------------
// model lifecycle

struct model_args {
  std::string config;
  std::string corpus, images, units, init, out, checkpoint;
  std::size_t beam = 1;
  std::size_t max_len = 0;
  std::size_t log_every = 0;
  overrides flags;
};

std::map<std::string, std::vector<unit_id>> load_image_tokens(const std::string &manifest) {
  std::map<std::string, std::vector<unit_id>> out;
  for (const auto &e : read_unit_manifest(manifest))
    if (!out.emplace(e.id, load_units(e.path).tokens()).second)
      throw format_error(manifest + ": duplicate image id " + e.id);
  return out;
}

const std::vector<unit_id> &lookup(const std::map<std::string, std::vector<unit_id>> &m, const std::string &id,
                                   const std::string &what) {
  auto it = m.find(id);
  if (it == m.end())
    throw format_error("no image units for " + what + " id " + id);
  return it->second;
}

std::vector<unit_id> parse_caption(const std::string &text) {
  std::vector<unit_id> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) {
    const auto id = word_id(w);
    if (!id)
      throw format_error("unknown caption word \"" + w + "\"");
    words.push_back(*id);
  }
  return words;
}

train_result run_training(model_params init, const std::vector<sequence_example> &examples, const train_hyper &h,
                          std::size_t log_every, bool text) {
  const auto r = text ? pretrain_text(std::move(init), examples, h,
                                      [&](std::size_t step, double loss) {
                                        if (log_every && step % log_every == 0)
                                          std::fprintf(stderr, "step %zu loss %.6f\n", step, loss);
                                        return true;
                                      })
                      : train(std::move(init), examples, h, [&](std::size_t step, double loss) {
                          if (log_every && step % log_every == 0)
                            std::fprintf(stderr, "step %zu loss %.6f\n", step, loss);
                          return true;
                        });
  return r;
}

// Per-step loss trace beside the checkpoint, tab-separated.
void save_trace(const std::string &checkpoint, const std::vector<double> &trace) {
  std::ostringstream os;
  os << "# step\tloss\n";
  char buf[64];
  for (std::size_t i = 0; i < trace.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", i + 1, trace[i]);
    os << buf;
  }
  detail::write_text(checkpoint + ".trace.tsv", os.str());
}

void report_training(const train_result &r, const std::vector<sequence_example> &examples) {
  const auto reached = steps_to_threshold(r.loss_trace, 0.5);
  std::printf("steps=%zu\nfinal_loss=%.6f\naccuracy=%.6f\nsteps_to_loss_0.5=%s\n", r.loss_trace.size(),
              r.loss_trace.back(), teacher_forced_accuracy(r.params, examples),
              reached ? std::to_string(*reached).c_str() : "none");
}

int run_pretrain_text(model_args &a) {
  const auto kv = a.flags.resolve(a.config);
  auto cfg = model_config::from_kv(kv);
  cfg.output = output_kind::text;
  const auto h = train_hyper::from_kv(kv);
  const auto images = load_image_tokens(a.images);
  std::vector<sequence_example> examples;
  for (const auto &e : read_corpus_manifest(a.corpus))
    examples.push_back({lookup(images, e.id, "corpus"), parse_caption(e.text)});
  const auto r = run_training(init_random(cfg, cfg.seed), examples, h, a.log_every, true);
  save_checkpoint(a.out, r.params);
  save_trace(a.out, r.loss_trace);
  report_training(r, examples);
  return ok;
}

int run_train(model_args &a) {
  const auto kv = a.flags.resolve(a.config);
  auto cfg = model_config::from_kv(kv);
  cfg.output = output_kind::units;
  const auto h = train_hyper::from_kv(kv);
  const auto images = load_image_tokens(a.images);
  std::vector<sequence_example> examples;
  for (const auto &e : read_unit_manifest(a.units))
    examples.push_back({lookup(images, e.id, "unit"), load_units(e.path).tokens()});
  const auto init = a.init.empty() ? init_random(cfg, cfg.seed) : init_transfer(load_checkpoint(a.init), cfg);
  const auto r = run_training(init, examples, h, a.log_every, false);
  save_checkpoint(a.out, r.params);
  save_trace(a.out, r.loss_trace);
  report_training(r, examples);
  return ok;
}

int run_generate(const model_args &a) {
  const auto p = load_checkpoint(a.checkpoint);
  const std::size_t max_len = a.max_len ? a.max_len : p.config.max_unit_len;
  ensure_dir(a.out);
  std::vector<unit_entry> written;
  std::size_t truncated = 0;
  for (const auto &e : read_unit_manifest(a.images)) {
    const auto g = generate(p, load_units(e.path).tokens(), max_len, a.beam);
    const std::string name = e.id + ".ucu";
    save_units(join(a.out, name), g.units);
    written.push_back({e.id, name});
    truncated += g.hit_max_len;
  }
  write_unit_manifest(join(a.out, "manifest.tsv"), written);
  std::cout << "generated=" << written.size() << "\nhit_max_len=" << truncated
            << "\nmanifest=" << join(a.out, "manifest.tsv") << "\n";
  return ok;
}

// ---------------------------------------------------------------------------
// evaluate / bits-report

int run_evaluate(const std::string &hyp_manifest, const std::string &ref_manifest, const std::string &format) {
  std::map<std::string, std::vector<token_seq>> refs;
  for (const auto &e : read_unit_manifest(ref_manifest))
    refs[e.id].push_back(load_units(e.path).tokens());
  std::vector<eval_pair> corpus;
  for (const auto &e : read_unit_manifest(hyp_manifest)) {
    auto it = refs.find(e.id);
    if (it == refs.end())
      throw format_error("no reference for hypothesis id " + e.id);
    corpus.push_back({load_units(e.path).tokens(), it->second});
  }
  const auto r = evaluate(corpus);
  if (format != "kv")
    std::cout << format_table(r);
  if (format != "table")
    std::cout << format_key_values(r);
  return ok;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Image-to-speech-unit pipeline"};
  app.require_subcommand(1);

  gen_args gen;
  auto *gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic image/caption/speech corpus");
  gen_cmd->add_option("--seed", gen.seed, "corpus seed");
  gen_cmd->add_option("--n", gen.n, "number of items");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--noise-fraction", gen.noise_fraction, "feature noise as a fraction of half the centroid gap");
  gen_cmd->add_option("--split", gen.split, "train,val,test fractions")->delimiter(',');
  gen_cmd->add_option("--split-seed", gen.split_seed, "split permutation seed");

  codebook_args cb;
  auto *cb_cmd = app.add_subcommand("train-codebook", "Fit a K-means codebook");
  cb_cmd->add_option("--modality", cb.modality)->required()->check(CLI::IsMember({"speech", "image"}));
  cb_cmd->add_option("--k", cb.k, "codebook size")->required()->check(CLI::PositiveNumber);
  cb_cmd->add_option("--in", cb.in, "corpus manifest")->required();
  cb_cmd->add_option("--out", cb.out, "codebook file")->required();
  cb_cmd->add_option("--seed", cb.seed, "k-means++ seed");
  cb_cmd->add_option("--patch", cb.patch, "image patch size")->check(CLI::PositiveNumber);
  cb_cmd->add_option("--max-iters", cb.max_iters, "Lloyd iteration cap");
  cb_cmd->add_option("--restarts", cb.restarts, "seeded fits to run; the lowest inertia wins")
      ->check(CLI::PositiveNumber);

  encode_args enc;
  auto *enc_cmd = app.add_subcommand("encode", "Quantise features or images into unit streams");
  enc_cmd->add_option("--modality", enc.modality)->required()->check(CLI::IsMember({"speech", "image"}));
  enc_cmd->add_option("--codebook", enc.codebook_path)->required();
  enc_cmd->add_option("--in", enc.in, "feature/PPM file, or a corpus manifest (.tsv)")->required();
  enc_cmd->add_option("--out", enc.out, "unit file, or output directory for a manifest")->required();
  enc_cmd->add_flag("--no-dedup", enc.no_dedup, "keep repeated speech units");
  enc_cmd->add_option("--patch", enc.patch, "image patch size")->check(CLI::PositiveNumber);

  model_args pre;
  auto *pre_cmd = app.add_subcommand("pretrain-text", "Train the decoder on image units to caption words");
  pre_cmd->add_option("--config", pre.config, "key=value settings file");
  pre_cmd->add_option("--corpus", pre.corpus, "corpus manifest (captions)")->required();
  pre_cmd->add_option("--images", pre.images, "image unit manifest")->required();
  pre_cmd->add_option("--out", pre.out, "checkpoint to write")->required();
  pre_cmd->add_option("--log-every", pre.log_every, "print loss every N steps to stderr");
  add_model_flags(*pre_cmd, pre.flags);

  model_args tr;
  auto *tr_cmd = app.add_subcommand("train", "Train the decoder on image units to speech units");
  tr_cmd->add_option("--config", tr.config, "key=value settings file");
  tr_cmd->add_option("--images", tr.images, "image unit manifest")->required();
  tr_cmd->add_option("--units", tr.units, "speech unit manifest (targets)")->required();
  tr_cmd->add_option("--init", tr.init, "text checkpoint for transfer initialisation");
  tr_cmd->add_option("--out", tr.out, "checkpoint to write")->required();
  tr_cmd->add_option("--log-every", tr.log_every, "print loss every N steps to stderr");
  add_model_flags(*tr_cmd, tr.flags);

  model_args gn;
  auto *gn_cmd = app.add_subcommand("generate", "Decode speech units for each image");
  gn_cmd->add_option("--checkpoint", gn.checkpoint)->required();
  gn_cmd->add_option("--images", gn.images, "image unit manifest")->required();
  gn_cmd->add_option("--out", gn.out, "output directory")->required();
  gn_cmd->add_option("--beam", gn.beam, "beam size; 1 is greedy")->check(CLI::PositiveNumber);
  gn_cmd->add_option("--max-len", gn.max_len, "maximum output length (default max_unit_len)");

  std::string hyp, ref, eval_format = "both";
  auto *ev_cmd = app.add_subcommand("evaluate", "BLEU-4, ROUGE-L and CIDEr over unit streams");
  ev_cmd->add_option("--hyp-manifest", hyp)->required();
  ev_cmd->add_option("--ref-manifest", ref)->required();
  ev_cmd->add_option("--format", eval_format)->check(CLI::IsMember({"table", "kv", "both"}));

  bits_config bits;
  double duration = bits.duration_s;
  std::uint64_t dedup_length = 0;
  std::string bits_format = "both";
  auto *bits_cmd = app.add_subcommand("bits-report", "Bit budget of units against raw signals");
  bits_cmd->add_option("--image-h", bits.image_h);
  bits_cmd->add_option("--image-w", bits.image_w);
  bits_cmd->add_option("--channels", bits.channels);
  bits_cmd->add_option("--pixel-depth", bits.pixel_depth);
  bits_cmd->add_option("--patch", bits.patch);
  bits_cmd->add_option("--image-codebook", bits.image_codebook);
  bits_cmd->add_option("--duration", duration, "seconds of audio");
  bits_cmd->add_option("--sample-rate", bits.sample_rate);
  bits_cmd->add_option("--audio-depth", bits.audio_depth);
  bits_cmd->add_option("--factor", bits.factor, "feature downsampling factor");
  bits_cmd->add_option("--unit-vocab", bits.unit_vocab);
  bits_cmd->add_option("--mel-fps", bits.mel_fps);
  bits_cmd->add_option("--mel-dims", bits.mel_dims);
  bits_cmd->add_option("--mel-depth", bits.mel_depth);
  auto *dedup_opt = bits_cmd->add_option("--dedup-length", dedup_length, "measured unit count after dedup");
  bits_cmd->add_option("--format", bits_format)->check(CLI::IsMember({"table", "kv", "both"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    std::cerr << "im2sp: " << e.what() << "\n";
    return usage;
  }

  try {
    if (*gen_cmd)
      return run_gen_data(gen);
    if (*cb_cmd)
      return run_train_codebook(cb);
    if (*enc_cmd)
      return run_encode(enc);
    if (*pre_cmd)
      return run_pretrain_text(pre);
    if (*tr_cmd)
      return run_train(tr);
    if (*gn_cmd)
      return run_generate(gn);
    if (*ev_cmd)
      return run_evaluate(hyp, ref, eval_format);
    if (*bits_cmd) {
      bits.duration_s = duration;
      if (dedup_opt->count() > 0)
        bits.dedup_length = dedup_length;
      const auto r = report(bits);
      if (bits_format != "kv")
        std::cout << format_table(r);
      if (bits_format != "table")
        std::cout << format_key_values(r);
      return ok;
    }
  } catch (const usage_error &e) {
    std::cerr << "im2sp: " << e.what() << "\n";
    return usage;
  } catch (const numeric_error &e) {
    std::cerr << "im2sp: " << e.what() << "\n";
    return numeric;
  } catch (const std::exception &e) {
    std::cerr << "im2sp: " << e.what() << "\n";
    return data;
  }
  return usage;
}

// Command-line driver: train / fit / classify / sample / impute / xval plus
// the distributed serve-worker and train-distributed modes.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "sam/container_io.hpp"
#include "sam/distrib.hpp"
#include "sam/image_io.hpp"
#include "sam/inference.hpp"
#include "sam/trainer.hpp"

namespace {

using nlohmann::ordered_json;

int log_level() {
    const char* v = std::getenv("SAM_LOG");
    if (!v) return 0;
    const std::string s(v);
    if (s == "debug") return 2;
    if (s == "info") return 1;
    return 0;
}

void info(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[sam] " << msg << "\n";
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

template <std::size_t N>
std::array<double, N> parse_fixed(const std::string& s, const std::string& flag) {
    const std::vector<std::string> parts = split_csv(s);
    if (parts.size() != N)
        throw CLI::ValidationError(flag, "expected " + std::to_string(N) + " comma-separated values");
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = std::stod(parts[i]);
    return out;
}

struct TrainFlags {
    int K = 8;
    int Ka = -1, Kv = -1;
    bool split = false;
    int iters = 10;
    std::string lambda = "0.95,0.05";
    std::string omega_a = "0.002,0.2,0";
    std::string omega_v = "0.002,0.02,2,0.2,0.2";
    std::string omega_mu; // default derived from N when empty
    double nu0 = 0.0;
    int t_steps = 8;
    std::uint64_t seed = 1;
    int threads = 1;
};

void add_train_flags(CLI::App* cmd, TrainFlags& tf) {
    cmd->add_option("-K,--latents", tf.K, "number of latent variables (shared mode)");
    cmd->add_option("--Ka", tf.Ka, "appearance basis count (split mode)");
    cmd->add_option("--Kv", tf.Kv, "velocity basis count (split mode)");
    cmd->add_flag("--split", tf.split, "separate latents for shape and appearance");
    cmd->add_option("--iters", tf.iters, "EM iterations");
    cmd->add_option("--lambda", tf.lambda, "lambda1,lambda2 regularisation mix");
    cmd->add_option("--omega-a", tf.omega_a, "appearance operator weights w0,w1,w2");
    cmd->add_option("--omega-v", tf.omega_v, "velocity operator weights w0..w4");
    cmd->add_option("--omega-mu", tf.omega_mu,
                    "mean operator weights w0,w1,w2 (absolute, not scaled by N)");
    cmd->add_option("--nu0", tf.nu0, "Wishart degrees of freedom (default K)");
    cmd->add_option("--t-steps", tf.t_steps, "shooting integration steps");
    cmd->add_option("--seed", tf.seed, "RNG seed");
    cmd->add_option("--threads", tf.threads, "worker threads (results are thread-invariant)");
}

sam::HyperParams hyper_from_flags(const TrainFlags& tf, sam::DataKind kind, int n_images) {
    sam::HyperParams h;
    if (tf.split) {
        h.shared_latents = false;
        h.K_a = tf.Ka >= 0 ? tf.Ka : tf.K / 2;
        h.K_v = tf.Kv >= 0 ? tf.Kv : tf.K - tf.K / 2;
    } else {
        h.shared_latents = true;
        h.K_a = h.K_v = tf.K;
    }
    const auto lam = parse_fixed<2>(tf.lambda, "--lambda");
    h.lambda1 = lam[0];
    h.lambda2 = lam[1];
    h.omega_a = parse_fixed<3>(tf.omega_a, "--omega-a");
    h.omega_v = parse_fixed<5>(tf.omega_v, "--omega-v");
    if (tf.omega_mu.empty()) {
        const double n = static_cast<double>(n_images);
        h.omega_mu = {1e-5 * n, 1e-3 * n, 0.0};
    } else {
        h.omega_mu = parse_fixed<3>(tf.omega_mu, "--omega-mu");
    }
    h.nu0 = tf.nu0;
    h.t_steps = tf.t_steps;
    h.em_iters = tf.iters;
    h.kind = kind;
    return h;
}

ordered_json iteration_json(const sam::IterationLog& il, const sam::TrainReport& report) {
    ordered_json j;
    j["iter"] = il.iter;
    j["objective"] = il.objective;
    ordered_json terms;
    terms["data"] = il.terms.data;
    terms["mu_prior"] = il.terms.mu_prior;
    terms["basis_trace"] = il.terms.basis_trace;
    terms["wishart"] = il.terms.wishart;
    terms["strategy2"] = il.terms.strategy2;
    j["terms"] = terms;
    j["sigma2"] = il.sigma2;
    std::vector<std::int64_t> halvings;
    for (const sam::StepRecord& s : report.steps)
        if (s.iter == il.iter) halvings.push_back(s.halvings);
    j["halvings"] = halvings;
    j["latent_rejected"] = il.latent_rejected;
    return j;
}

void write_jsonl_log(const std::string& path, const sam::TrainReport& report) {
    if (path.empty()) return;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw sam::Error("cannot write " + path);
    for (const sam::IterationLog& il : report.iterations)
        os << iteration_json(il, report).dump() << "\n";
}

// ---------------------------------------------------------------------------

int cmd_train(const std::string& data_path, const std::string& out_path, std::string log_path,
              const std::string& model_kind, const TrainFlags& tf) {
    const sam::ImageDataset ds = sam::read_samd(data_path);
    if (!model_kind.empty() && sam::data_kind_from_string(model_kind) != ds.kind)
        throw sam::Error("--model-kind does not match the dataset kind (" +
                         sam::to_string(ds.kind) + ")");
    sam::HyperParams hyper = hyper_from_flags(tf, ds.kind, ds.n_images);
    sam::TrainOptions opt;
    opt.threads = tf.threads;
    opt.on_iteration = [](const sam::IterationLog& il) {
        info("iter " + std::to_string(il.iter) + " objective " + std::to_string(il.objective));
    };
    auto [model, latents, report] = sam::train(ds, hyper, tf.seed, opt);
    (void)latents;
    sam::write_samm(out_path, model);
    if (log_path.empty()) log_path = out_path + ".log.jsonl";
    write_jsonl_log(log_path, report);
    info("model written to " + out_path);
    return 0;
}

int cmd_fit(const std::string& model_path, const std::string& data_path,
            const std::string& out_path, int iters) {
    const sam::ModelState model = sam::read_samm(model_path);
    const sam::ImageDataset ds = sam::read_samd(data_path);
    if (ds.grid != model.grid || ds.channels != model.channels || ds.kind != model.hyper.kind)
        throw sam::Error("dataset does not match the model grid/kind");
    const sam::InferenceContext ctx(model);
    const int k = model.K();
    sam::LatentFeatures lf;
    lf.z.resize(k, ds.n_images);
    lf.hess_diag.resize(k, ds.n_images);
    for (int n = 0; n < ds.n_images; ++n) {
        const sam::Posterior post = sam::fit(ctx, ds.image(n), ds.image_mask(n), iters);
        lf.z.col(n) = post.z_hat;
        lf.hess_diag.col(n) = post.hessian.diagonal();
    }
    sam::write_latent_features(out_path, lf);
    info("latent features written to " + out_path);
    return 0;
}

int cmd_classify(const std::string& models_csv, const std::string& data_path,
                 const std::string& out_path, const std::string& priors_csv, int iters) {
    const std::vector<std::string> model_paths = split_csv(models_csv);
    if (model_paths.empty()) throw sam::Error("classify: no models given");
    std::vector<std::unique_ptr<sam::InferenceContext>> ctxs;
    for (const std::string& p : model_paths)
        ctxs.push_back(std::make_unique<sam::InferenceContext>(sam::read_samm(p)));
    std::vector<double> priors(model_paths.size(), 1.0 / model_paths.size());
    if (!priors_csv.empty()) {
        const std::vector<std::string> parts = split_csv(priors_csv);
        if (parts.size() != model_paths.size())
            throw sam::Error("classify: need one prior per model");
        for (std::size_t i = 0; i < parts.size(); ++i) priors[i] = std::stod(parts[i]);
    }
    const sam::ImageDataset ds = sam::read_samd(data_path);
    std::vector<const sam::InferenceContext*> views;
    for (auto& c : ctxs) views.push_back(c.get());

    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw sam::Error("cannot write " + out_path);
    os << "image";
    for (std::size_t i = 0; i < model_paths.size(); ++i) os << ",p" << i;
    os << ",argmax\n";
    os.precision(12);
    for (int n = 0; n < ds.n_images; ++n) {
        const std::vector<double> p =
            sam::classify(views, ds.image(n), ds.image_mask(n), priors, iters);
        os << n;
        std::size_t best = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            os << "," << p[i];
            if (p[i] > p[best]) best = i;
        }
        os << "," << best << "\n";
    }
    info("posterior table written to " + out_path);
    return 0;
}

int cmd_sample(const std::string& model_path, const std::string& out_path,
               const std::string& what, int rows, int cols, double sd_span,
               std::uint64_t seed) {
    const sam::ModelState model = sam::read_samm(model_path);
    const sam::InferenceContext ctx(model);
    std::vector<std::vector<double>> images;
    int r = rows, c = cols;
    if (what == "mean") {
        r = c = 1;
        images.push_back(sam::reconstruct(ctx, Eigen::VectorXd::Zero(model.K())));
    } else if (what == "samples") {
        for (int i = 0; i < rows * cols; ++i)
            images.push_back(sam::sample_image(ctx, seed + static_cast<std::uint64_t>(i)));
    } else if (what == "modes") {
        // one basis column per row, swept from -sd_span to +sd_span s.d.
        const Eigen::MatrixXd cov =
            model.A_hat.llt().solve(Eigen::MatrixXd::Identity(model.K(), model.K()));
        r = std::min(rows, model.K());
        for (int j = 0; j < r; ++j) {
            const double sd = std::sqrt(std::max(cov(j, j), 0.0));
            for (int i = 0; i < c; ++i) {
                const double level =
                    c == 1 ? 0.0 : -sd_span + 2.0 * sd_span * i / static_cast<double>(c - 1);
                Eigen::VectorXd z = Eigen::VectorXd::Zero(model.K());
                z[j] = level * sd;
                images.push_back(sam::reconstruct(ctx, z));
            }
        }
    } else {
        throw sam::Error("sample: --what must be samples|modes|mean");
    }
    sam::write_image_grid(out_path, model.grid, model.channels, images, r, c);
    info("image grid written to " + out_path);
    return 0;
}

int cmd_impute(const std::string& model_path, const std::string& data_path,
               const std::string& out_path) {
    const sam::ModelState model = sam::read_samm(model_path);
    const sam::ImageDataset ds = sam::read_samd(data_path);
    if (ds.grid != model.grid || ds.channels != model.channels || ds.kind != model.hyper.kind)
        throw sam::Error("dataset does not match the model grid/kind");
    const sam::InferenceContext ctx(model);
    sam::ImageDataset out = ds;
    for (int n = 0; n < ds.n_images; ++n) {
        const std::vector<float> filled = sam::impute(ctx, ds.image(n), ds.image_mask(n));
        std::copy(filled.begin(), filled.end(), out.image(n));
        std::fill(out.image_mask(n), out.image_mask(n) + out.voxels(), 1);
    }
    sam::write_samd(out_path, out);
    info("imputed dataset written to " + out_path);
    return 0;
}

int cmd_xval(const std::string& data_path, const std::string& out_path, double fraction,
             const std::string& variants_csv, const TrainFlags& tf) {
    const sam::ImageDataset original = sam::read_samd(data_path);
    sam::ImageDataset masked = original;
    const auto held = sam::mask_random_rectangles(masked, fraction, tf.seed ^ 0x9e37);

    // per-voxel mean fill over the still-observed data, the baseline
    const std::int64_t m = masked.voxels();
    std::vector<double> mean_img(static_cast<std::size_t>(masked.channels) * m, 0.0);
    std::vector<double> counts(static_cast<std::size_t>(m), 0.0);
    for (int n = 0; n < masked.n_images; ++n) {
        const float* img = masked.image(n);
        const std::uint8_t* mk = masked.image_mask(n);
        for (std::int64_t v = 0; v < m; ++v) {
            if (!mk[v]) continue;
            counts[v] += 1.0;
            for (int c = 0; c < masked.channels; ++c)
                mean_img[static_cast<std::size_t>(c) * m + v] +=
                    img[static_cast<std::size_t>(c) * m + v];
        }
    }
    for (std::int64_t v = 0; v < m; ++v)
        if (counts[v] > 0)
            for (int c = 0; c < masked.channels; ++c)
                mean_img[static_cast<std::size_t>(c) * m + v] /= counts[v];

    double meanfill_se = 0.0;
    std::int64_t heldout_count = 0;
    for (int n = 0; n < masked.n_images; ++n) {
        const float* truth = original.image(n);
        for (std::int64_t v = 0; v < m; ++v) {
            if (!held[n][v]) continue;
            ++heldout_count;
            for (int c = 0; c < masked.channels; ++c) {
                const double d = mean_img[static_cast<std::size_t>(c) * m + v] -
                                 truth[static_cast<std::size_t>(c) * m + v];
                meanfill_se += d * d;
            }
        }
    }
    const double denom = static_cast<double>(heldout_count) * masked.channels;
    const double meanfill_mse = meanfill_se / denom;

    std::ofstream os(out_path, std::ios::trunc);
    if (!os) throw sam::Error("cannot write " + out_path);
    os << "variant,heldout_loglik,masked_mse,meanfill_mse\n";
    os.precision(10);

    for (const std::string& variant : split_csv(variants_csv)) {
        TrainFlags vf = tf;
        if (variant == "shared") {
            vf.split = false;
        } else if (variant == "split") {
            vf.split = true;
        } else if (variant == "shape") {
            vf.split = true;
            vf.Ka = 0;
            vf.Kv = tf.K;
        } else if (variant == "appearance") {
            vf.split = true;
            vf.Ka = tf.K;
            vf.Kv = 0;
        } else {
            throw sam::Error("xval: unknown variant '" + variant + "'");
        }
        sam::HyperParams hyper = hyper_from_flags(vf, masked.kind, masked.n_images);
        sam::TrainOptions opt;
        opt.threads = tf.threads;
        info("xval: training variant " + variant);
        auto [model, latents, report] = sam::train(masked, hyper, tf.seed, opt);
        (void)latents;
        (void)report;
        const sam::InferenceContext ctx(model);

        double ll = 0.0, se = 0.0;
        for (int n = 0; n < masked.n_images; ++n) {
            ll += sam::heldout_loglik(ctx, original.image(n), masked.image_mask(n),
                                      held[n].data());
            const sam::Posterior post = sam::fit(ctx, masked.image(n), masked.image_mask(n));
            const std::vector<double> recon = sam::reconstruct(ctx, post.z_hat);
            const float* truth = original.image(n);
            for (std::int64_t v = 0; v < m; ++v) {
                if (!held[n][v]) continue;
                for (int c = 0; c < masked.channels; ++c) {
                    const double d = recon[static_cast<std::size_t>(c) * m + v] -
                                     truth[static_cast<std::size_t>(c) * m + v];
                    se += d * d;
                }
            }
        }
        os << variant << "," << ll / masked.n_images << "," << se / denom << ","
           << meanfill_mse << "\n";
    }
    info("cross-validation table written to " + out_path);
    return 0;
}

int cmd_serve_worker(const std::string& data_path, int port, int threads) {
    const sam::ImageDataset shard = sam::read_samd(data_path);
    sam::WorkerOptions opt;
    opt.threads = threads;
    info("serving " + std::to_string(shard.n_images) + " images on port " + std::to_string(port));
    sam::serve_worker(shard, static_cast<std::uint16_t>(port), opt);
    info("worker shut down");
    return 0;
}

int cmd_train_distributed(const std::string& workers_csv, const std::string& out_path,
                          std::string log_path, const TrainFlags& tf,
                          const std::string& kind_str) {
    const std::vector<std::string> endpoints = split_csv(workers_csv);
    if (endpoints.empty()) throw sam::Error("train-distributed: no worker endpoints");
    // the master holds no data, so N is unknown until HELLO and omega_mu
    // cannot be defaulted from it
    if (tf.omega_mu.empty())
        throw sam::Error("train-distributed: --omega-mu is required");
    sam::HyperParams hyper = hyper_from_flags(tf, sam::data_kind_from_string(kind_str), 1);

    sam::MasterOptions opt;
    opt.on_iteration = [](const sam::IterationLog& il) {
        info("iter " + std::to_string(il.iter) + " objective " + std::to_string(il.objective));
    };
    auto [model, report] = sam::master_train(endpoints, hyper, tf.seed, opt);
    sam::write_samm(out_path, model);
    if (log_path.empty()) log_path = out_path + ".log.jsonl";
    write_jsonl_log(log_path, report);
    info("model written to " + out_path);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"shape and appearance model trainer"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "fit a model to a SAMD dataset");
    std::string data_path, out_path, log_path, model_kind;
    TrainFlags tf;
    train->add_option("--data", data_path, "input SAMD dataset")->required();
    train->add_option("--out", out_path, "output SAMM model")->required();
    train->add_option("--log", log_path, "JSONL training log (default <out>.log.jsonl)");
    train->add_option("--model-kind", model_kind, "expected noise model, must match the data");
    add_train_flags(train, tf);

    // fit
    auto* fit = app.add_subcommand("fit", "fit latent codes of new images");
    std::string fit_model, fit_data, fit_out;
    int fit_iters = 20;
    fit->add_option("--model", fit_model)->required();
    fit->add_option("--data", fit_data)->required();
    fit->add_option("--out", fit_out, "latent feature container")->required();
    fit->add_option("--iters", fit_iters, "max Gauss-Newton iterations");

    // classify
    auto* classify = app.add_subcommand("classify", "generative classification by model evidence");
    std::string cls_models, cls_data, cls_out, cls_priors;
    int cls_iters = 20;
    classify->add_option("--models", cls_models, "comma-separated SAMM files")->required();
    classify->add_option("--data", cls_data)->required();
    classify->add_option("--out", cls_out, "CSV of posterior probabilities")->required();
    classify->add_option("--priors", cls_priors, "comma-separated class priors (default uniform)");
    classify->add_option("--iters", cls_iters, "max Gauss-Newton iterations per fit");

    // sample
    auto* sample = app.add_subcommand("sample", "draw samples / modes as a PGM/PPM grid");
    std::string smp_model, smp_out, smp_what = "samples";
    int smp_rows = 4, smp_cols = 6;
    double smp_sd = 3.0;
    std::uint64_t smp_seed = 1;
    sample->add_option("--model", smp_model)->required();
    sample->add_option("--out", smp_out, "output PGM (1 channel) or PPM (3 channels)")->required();
    sample->add_option("--what", smp_what, "samples|modes|mean");
    sample->add_option("--rows", smp_rows);
    sample->add_option("--cols", smp_cols);
    sample->add_option("--sd", smp_sd, "mode sweep extent in standard deviations");
    sample->add_option("--seed", smp_seed);

    // impute
    auto* impute = app.add_subcommand("impute", "fill missing voxels from the model");
    std::string imp_model, imp_data, imp_out;
    impute->add_option("--model", imp_model)->required();
    impute->add_option("--data", imp_data)->required();
    impute->add_option("--out", imp_out, "filled SAMD dataset")->required();

    // xval
    auto* xval = app.add_subcommand("xval", "missing-data cross-validation across variants");
    std::string xv_data, xv_out, xv_variants = "shape,appearance,shared,split";
    double xv_fraction = 0.25;
    TrainFlags xtf;
    xval->add_option("--data", xv_data)->required();
    xval->add_option("--out", xv_out, "CSV summary table")->required();
    xval->add_option("--fraction", xv_fraction, "masked rectangle area fraction");
    xval->add_option("--variants", xv_variants, "subset of shape,appearance,shared,split");
    add_train_flags(xval, xtf);

    // serve-worker
    auto* worker = app.add_subcommand("serve-worker", "serve a data shard to a training master");
    std::string wk_data;
    int wk_port = 0, wk_threads = 1;
    worker->add_option("--data", wk_data)->required();
    worker->add_option("--port", wk_port)->required();
    worker->add_option("--threads", wk_threads);

    // train-distributed
    auto* dist = app.add_subcommand("train-distributed", "train against serve-worker shards");
    std::string ds_workers, ds_out, ds_log, ds_kind;
    TrainFlags dtf;
    dist->add_option("--workers", ds_workers, "comma-separated host:port endpoints")->required();
    dist->add_option("--out", ds_out)->required();
    dist->add_option("--log", ds_log);
    dist->add_option("--model-kind", ds_kind, "noise model of the shards")->required();
    add_train_flags(dist, dtf);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2; // help/version exit 0, flag misuse exits 2
    }

    try {
        if (*train) return cmd_train(data_path, out_path, log_path, model_kind, tf);
        if (*fit) return cmd_fit(fit_model, fit_data, fit_out, fit_iters);
        if (*classify) return cmd_classify(cls_models, cls_data, cls_out, cls_priors, cls_iters);
        if (*sample) return cmd_sample(smp_model, smp_out, smp_what, smp_rows, smp_cols, smp_sd,
                                       smp_seed);
        if (*impute) return cmd_impute(imp_model, imp_data, imp_out);
        if (*xval) return cmd_xval(xv_data, xv_out, xv_fraction, xv_variants, xtf);
        if (*worker) return cmd_serve_worker(wk_data, wk_port, wk_threads);
        if (*dist) return cmd_train_distributed(ds_workers, ds_out, ds_log, dtf, ds_kind);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

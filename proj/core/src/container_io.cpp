#include "sam/container_io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "sam/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "container codecs assume a little-endian host");

namespace sam {

namespace {

using ordered_json = nlohmann::ordered_json;

void put_u16(std::ostream& os, std::uint16_t v) { os.write(reinterpret_cast<char*>(&v), 2); }
void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }

std::uint16_t get_u16(std::istream& is) {
    std::uint16_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 2);
    return v;
}
std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

ordered_json read_framed_header(std::istream& is, const char* magic, const std::string& path) {
    char m[4];
    is.read(m, 4);
    if (!is || std::memcmp(m, magic, 4) != 0)
        throw Error(path + ": bad magic, expected " + magic);
    const std::uint16_t version = get_u16(is);
    if (version != 1)
        throw Error(path + ": unsupported container version " + std::to_string(version));
    const std::uint32_t hlen = get_u32(is);
    std::string htext(hlen, '\0');
    is.read(htext.data(), hlen);
    if (!is) throw Error(path + ": truncated header");
    ordered_json h = ordered_json::parse(htext, nullptr, false);
    if (h.is_discarded()) throw Error(path + ": header is not valid JSON");
    return h;
}

void write_framed_header(std::ostream& os, const char* magic, const ordered_json& h) {
    const std::string htext = h.dump();
    os.write(magic, 4);
    put_u16(os, 1);
    put_u32(os, static_cast<std::uint32_t>(htext.size()));
    os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
}

constexpr float kCanonicalNan = std::numeric_limits<float>::quiet_NaN();

} // namespace

ImageDataset read_samd(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    const ordered_json h = read_framed_header(is, "SAMD", path);

    std::vector<int> dims = h.at("dims").get<std::vector<int>>();
    const int n = h.at("n").get<int>();
    const int c = h.at("channels").get<int>();
    const DataKind kind = data_kind_from_string(h.at("kind").get<std::string>());

    ImageDataset ds = make_dataset(Grid(dims), n, c, kind);
    is.read(reinterpret_cast<char*>(ds.values.data()),
            static_cast<std::streamsize>(ds.values.size() * sizeof(float)));
    if (!is) throw Error(path + ": truncated payload");
    normalise_missing(ds);
    validate_dataset(ds);
    return ds;
}

void write_samd(const std::string& path, const ImageDataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    ordered_json h;
    h["dims"] = ds.grid.dims();
    h["n"] = ds.n_images;
    h["channels"] = ds.channels;
    h["kind"] = to_string(ds.kind);
    write_framed_header(os, "SAMD", h);

    const std::int64_t m = ds.voxels();
    std::vector<float> row(static_cast<std::size_t>(ds.channels) * m);
    for (int n = 0; n < ds.n_images; ++n) {
        const float* img = ds.image(n);
        const std::uint8_t* mask = ds.image_mask(n);
        std::memcpy(row.data(), img, row.size() * sizeof(float));
        // masked voxels go out as NaN; existing NaN bit patterns pass through
        for (std::int64_t v = 0; v < m; ++v)
            if (!mask[v])
                for (int ch = 0; ch < ds.channels; ++ch) {
                    float& x = row[static_cast<std::size_t>(ch) * m + v];
                    if (!std::isnan(x)) x = kCanonicalNan;
                }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw Error("short write to " + path);
}

namespace {

void append_array(ordered_json& arrays, std::vector<double>& payload, const std::string& name,
                  const std::vector<std::int64_t>& shape, const double* data, std::size_t count) {
    ordered_json entry;
    entry["offset"] = payload.size() * sizeof(double);
    entry["shape"] = shape;
    arrays[name] = entry;
    payload.insert(payload.end(), data, data + count);
}

const double* array_ptr(const ordered_json& h, const std::vector<double>& payload,
                        const std::string& name, std::size_t expected, const std::string& path) {
    const auto& e = h.at("arrays").at(name);
    const std::size_t off = e.at("offset").get<std::size_t>();
    if (off % sizeof(double) != 0 || off / sizeof(double) + expected > payload.size())
        throw Error(path + ": array " + name + " out of bounds");
    return payload.data() + off / sizeof(double);
}

} // namespace

void write_samm(const std::string& path, const ModelState& model) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path);

    const HyperParams& hy = model.hyper;
    const std::int64_t m = model.grid.voxels();
    const int k = model.K();

    ordered_json h;
    h["dims"] = model.grid.dims();
    h["channels"] = model.channels;
    h["kind"] = to_string(hy.kind);
    ordered_json hj;
    hj["K_a"] = hy.K_a;
    hj["K_v"] = hy.K_v;
    hj["shared_latents"] = hy.shared_latents;
    hj["omega_v"] = hy.omega_v;
    hj["omega_a"] = hy.omega_a;
    hj["omega_mu"] = hy.omega_mu;
    hj["lambda1"] = hy.lambda1;
    hj["lambda2"] = hy.lambda2;
    hj["nu0"] = hy.effective_nu0();
    hj["t_steps"] = hy.t_steps;
    hj["em_iters"] = hy.em_iters;
    h["hyper"] = hj;

    std::vector<double> payload;
    ordered_json arrays;
    append_array(arrays, payload, "mu", {model.channels, m}, model.mu.data(), model.mu.size());
    append_array(arrays, payload, "W_a", {hy.K_a, model.channels, m}, model.W_a.data(),
                 model.W_a.size());
    append_array(arrays, payload, "W_v", {hy.K_v, model.grid.nd, m}, model.W_v.data(),
                 model.W_v.size());
    Eigen::MatrixXd a_row = model.A_hat.transpose(); // row-major on disk
    append_array(arrays, payload, "A_hat", {k, k}, a_row.data(),
                 static_cast<std::size_t>(a_row.size()));
    append_array(arrays, payload, "sigma2", {model.channels}, model.sigma2.data(),
                 model.sigma2.size());
    Eigen::MatrixXd l0 = hy.effective_lambda0().transpose();
    append_array(arrays, payload, "Lambda0", {k, k}, l0.data(),
                 static_cast<std::size_t>(l0.size()));
    h["arrays"] = arrays;

    write_framed_header(os, "SAMM", h);
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!os) throw Error("short write to " + path);
}

ModelState read_samm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    const ordered_json h = read_framed_header(is, "SAMM", path);

    std::vector<double> payload;
    {
        std::vector<char> rest((std::istreambuf_iterator<char>(is)),
                               std::istreambuf_iterator<char>());
        if (rest.size() % sizeof(double) != 0) throw Error(path + ": payload is not float64");
        payload.resize(rest.size() / sizeof(double));
        std::memcpy(payload.data(), rest.data(), rest.size());
    }

    HyperParams hy;
    const auto& hj = h.at("hyper");
    hy.K_a = hj.at("K_a").get<int>();
    hy.K_v = hj.at("K_v").get<int>();
    hy.shared_latents = hj.at("shared_latents").get<bool>();
    hy.omega_v = hj.at("omega_v").get<std::array<double, 5>>();
    hy.omega_a = hj.at("omega_a").get<std::array<double, 3>>();
    hy.omega_mu = hj.at("omega_mu").get<std::array<double, 3>>();
    hy.lambda1 = hj.at("lambda1").get<double>();
    hy.lambda2 = hj.at("lambda2").get<double>();
    hy.nu0 = hj.at("nu0").get<double>();
    hy.t_steps = hj.at("t_steps").get<int>();
    hy.em_iters = hj.at("em_iters").get<int>();
    hy.kind = data_kind_from_string(h.at("kind").get<std::string>());

    const Grid grid{h.at("dims").get<std::vector<int>>()};
    const int channels = h.at("channels").get<int>();
    const std::int64_t m = grid.voxels();
    const int k = hy.total_latents();

    Eigen::MatrixXd l0(k, k);
    {
        const double* p = array_ptr(h, payload, "Lambda0", static_cast<std::size_t>(k) * k, path);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) l0(i, j) = p[i * k + j];
    }
    hy.Lambda0 = l0;

    ModelState model = make_initial_model(grid, channels, hy);
    {
        const double* p = array_ptr(h, payload, "mu", model.mu.size(), path);
        std::copy(p, p + model.mu.size(), model.mu.begin());
    }
    {
        const double* p = array_ptr(h, payload, "W_a", model.W_a.size(), path);
        std::copy(p, p + model.W_a.size(), model.W_a.begin());
    }
    {
        const double* p = array_ptr(h, payload, "W_v", model.W_v.size(), path);
        std::copy(p, p + model.W_v.size(), model.W_v.begin());
    }
    {
        const double* p = array_ptr(h, payload, "A_hat", static_cast<std::size_t>(k) * k, path);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) model.A_hat(i, j) = p[i * k + j];
    }
    {
        const double* p = array_ptr(h, payload, "sigma2", model.sigma2.size(), path);
        std::copy(p, p + model.sigma2.size(), model.sigma2.begin());
    }
    return model;
}

void write_latent_features(const std::string& path, const LatentFeatures& lf) {
    if (lf.z.rows() != lf.hess_diag.rows() || lf.z.cols() != lf.hess_diag.cols())
        throw Error("write_latent_features: shape mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + path);
    const int k = static_cast<int>(lf.z.rows());
    const int n = static_cast<int>(lf.z.cols());
    ordered_json h;
    h["dims"] = std::vector<int>{k};
    h["n"] = n;
    h["channels"] = 2;
    h["kind"] = "continuous";
    h["content"] = "latents";
    write_framed_header(os, "SAMD", h);
    std::vector<float> row(2 * static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            row[j] = static_cast<float>(lf.z(j, i));
            row[k + j] = static_cast<float>(lf.hess_diag(j, i));
        }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw Error("short write to " + path);
}

LatentFeatures read_latent_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path);
    const ordered_json h = read_framed_header(is, "SAMD", path);
    if (h.value("content", "") != std::string("latents"))
        throw Error(path + ": not a latent feature container");
    const std::vector<int> dims = h.at("dims").get<std::vector<int>>();
    if (dims.size() != 1) throw Error(path + ": latent container must be one-dimensional");
    const int k = dims[0];
    const int n = h.at("n").get<int>();
    LatentFeatures lf;
    lf.z.resize(k, n);
    lf.hess_diag.resize(k, n);
    std::vector<float> row(2 * static_cast<std::size_t>(k));
    for (int i = 0; i < n; ++i) {
        is.read(reinterpret_cast<char*>(row.data()),
                static_cast<std::streamsize>(row.size() * sizeof(float)));
        if (!is) throw Error(path + ": truncated payload");
        for (int j = 0; j < k; ++j) {
            lf.z(j, i) = row[j];
            lf.hess_diag(j, i) = row[k + j];
        }
    }
    return lf;
}

} // namespace sam

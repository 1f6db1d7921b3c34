#include "tad/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tad::nn {

int ParamStore::add(const std::string& name, Mat init) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name " + name);
    int id = static_cast<int>(tensors_.size());
    tensors_.push_back(std::move(init));
    names_.push_back(name);
    index_[name] = id;
    return id;
}

int ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

long ParamStore::total_coeffs() const {
    long n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

void ParamStore::copy_to_flat(double* out) const {
    long at = 0;
    for (const auto& t : tensors_) {
        std::copy(t.data(), t.data() + t.size(), out + at);
        at += t.size();
    }
}

void ParamStore::load_from_flat(const double* in) {
    long at = 0;
    for (auto& t : tensors_) {
        std::copy(in + at, in + at + t.size(), t.data());
        at += t.size();
    }
}

ad::Var TapeBinding::operator[](int param_id) {
    if (leaf_of_.empty()) leaf_of_.assign(store_->count(), -1);
    int& node = leaf_of_[param_id];
    if (node < 0) {
        node = constants_ ? g_->constant(store_->value(param_id)).idx
                          : g_->leaf(store_->value(param_id)).idx;
    }
    return ad::Var{g_, node};
}

void TapeBinding::export_grads(std::vector<Mat>& grads) const {
    grads.resize(store_->count());
    for (int p = 0; p < store_->count(); ++p) {
        int node = leaf_of_.empty() ? -1 : leaf_of_[p];
        if (node >= 0 && g_->grad_ready(node)) {
            grads[p] = g_->grad(node);
        } else {
            const Mat& v = store_->value(p);
            grads[p] = Mat::Zero(v.rows(), v.cols());
        }
    }
}

namespace {
Mat random_init(int rows, int cols, double scale, Rng& rng) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-scale, scale);
    }
    return m;
}
}  // namespace

Linear Linear::create(ParamStore& ps, const std::string& name, int in, int out, Rng& rng,
                      double scale, bool bias) {
    if (scale <= 0.0) scale = std::sqrt(1.0 / in);
    Linear l;
    l.w = ps.add(name + ".w", random_init(in, out, scale, rng));
    if (bias) l.b = ps.add(name + ".b", Mat::Zero(1, out));
    return l;
}

Linear Linear::zeros(ParamStore& ps, const std::string& name, int in, int out, bool bias) {
    Linear l;
    l.w = ps.add(name + ".w", Mat::Zero(in, out));
    if (bias) l.b = ps.add(name + ".b", Mat::Zero(1, out));
    return l;
}

ad::Var Linear::apply(TapeBinding& p, ad::Var x) const {
    ad::Var y = ad::matmul(x, p[w]);
    if (b >= 0) y = ad::rowwise_add(y, p[b]);
    return y;
}

LayerNorm LayerNorm::create(ParamStore& ps, const std::string& name, int dim) {
    LayerNorm ln;
    ln.gamma = ps.add(name + ".gamma", Mat::Ones(1, dim));
    ln.beta = ps.add(name + ".beta", Mat::Zero(1, dim));
    return ln;
}

ad::Var LayerNorm::apply(TapeBinding& p, ad::Var x) const {
    ad::Var y = ad::layer_norm_rows(x);
    y = ad::rowwise_mul(y, p[gamma]);
    return ad::rowwise_add(y, p[beta]);
}

Conv1d Conv1d::create(ParamStore& ps, const std::string& name, int in, int out, int kernel,
                      int stride, Rng& rng, bool bias) {
    Conv1d c;
    c.kernel = kernel;
    c.stride = stride;
    double scale = std::sqrt(1.0 / (in * kernel));
    c.w = ps.add(name + ".w", random_init(kernel * in, out, scale, rng));
    if (bias) c.b = ps.add(name + ".b", Mat::Zero(1, out));
    return c;
}

ad::Var Conv1d::apply(TapeBinding& p, ad::Var x, int valid_rows) const {
    const int rows = x.rows();
    const int out_rows = out_len(rows, stride);
    ad::Var y;
    if (kernel == 1 && stride == 1) {
        y = ad::matmul(x, p[w]);
    } else {
        ad::Var unfolded = ad::unfold_rows(x, kernel, stride, out_rows, valid_rows);
        y = ad::matmul(unfolded, p[w]);
    }
    if (b >= 0) y = ad::rowwise_add(y, p[b]);
    return y;
}

}  // namespace tad::nn

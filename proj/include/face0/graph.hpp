#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "face0/errors.hpp"
#include "face0/tensor.hpp"

namespace face0 {

// Dynamic tape: nodes are appended in execution order, values computed
// eagerly, and backward() replays recorded closures in reverse. The tape is
// rebuilt for every forward pass.
class Graph {
public:
    using Id = int;

    struct Node {
        Tensor value;
        Tensor grad;  // allocated on demand during backward
        bool needs_grad = false;
        bool grad_alloc = false;
        std::string param_name;  // set for named parameter leaves
        std::function<void(Graph&, Id)> backward;
    };

    // ---- leaves ----

    Id constant(Tensor v) {
        check_finite(v, "constant");
        return push(std::move(v), false);
    }

    Id input(Tensor v) {
        check_finite(v, "input");
        return push(std::move(v), true);
    }

    Id param(const std::string& name, const Tensor& v) {
        check_finite(v, "param");
        Id id = push(Tensor(v), true);
        nodes_[static_cast<std::size_t>(id)].param_name = name;
        return id;
    }

    const Tensor& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    const Tensor& grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
    bool has_grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad_alloc; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient of a named parameter after backward; zeros if untouched.
    Tensor param_grad(Id id) const {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad_alloc) return n.grad;
        return Tensor::zeros(n.value.dims);
    }

    // ---- elementwise ----

    Id add(Id a, Id b) {
        require_same_dims(value(a), value(b), "add");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
        return make("add", std::move(out), {a, b}, [a, b](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            g.accumulate(a, gr);
            g.accumulate(b, gr);
        });
    }

    Id sub(Id a, Id b) {
        require_same_dims(value(a), value(b), "sub");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
        return make("sub", std::move(out), {a, b}, [a, b](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            g.accumulate(a, gr);
            g.accumulate_scaled(b, gr, -1.0f);
        });
    }

    Id mul(Id a, Id b) {
        require_same_dims(value(a), value(b), "mul");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
        return make("mul", std::move(out), {a, b}, [a, b](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const Tensor& va = g.value(a);
            const Tensor& vb2 = g.value(b);
            if (g.wants(a)) {
                Tensor da = gr;
                for (std::size_t i = 0; i < da.numel(); ++i) da.data[i] *= vb2.data[i];
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                Tensor db = gr;
                for (std::size_t i = 0; i < db.numel(); ++i) db.data[i] *= va.data[i];
                g.accumulate(b, db);
            }
        });
    }

    Id scale(Id a, float s) {
        Tensor out = value(a);
        for (auto& v : out.data) v *= s;
        return make("scale", std::move(out), {a}, [a, s](Graph& g, Id self) {
            g.accumulate_scaled(a, g.grad(self), s);
        });
    }

    Id relu(Id a) {
        Tensor out = value(a);
        for (auto& v : out.data) v = v > 0.0f ? v : 0.0f;
        return make("relu", std::move(out), {a}, [a](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const Tensor& va = g.value(a);
            Tensor da = gr;
            for (std::size_t i = 0; i < da.numel(); ++i)
                if (va.data[i] <= 0.0f) da.data[i] = 0.0f;
            g.accumulate(a, da);
        });
    }

    // ---- linear algebra ----

    Id matmul(Id a, Id b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
            throw ShapeError("matmul: dims mismatch " + dims_str(va.dims) + " vs " +
                             dims_str(vb.dims));
        const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
        Tensor out = Tensor::zeros({m, n});
        for (int i = 0; i < m; ++i) {
            const float* arow = &va.data[static_cast<std::size_t>(i) * k];
            float* orow = &out.data[static_cast<std::size_t>(i) * n];
            for (int j = 0; j < k; ++j) {
                const float av = arow[j];
                const float* brow = &vb.data[static_cast<std::size_t>(j) * n];
                for (int c = 0; c < n; ++c) orow[c] += av * brow[c];
            }
        }
        return make("matmul", std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const Tensor& va2 = g.value(a);
            const Tensor& vb2 = g.value(b);
            if (g.wants(a)) {
                // dA = G * B^T
                Tensor da = Tensor::zeros({m, k});
                for (int i = 0; i < m; ++i) {
                    const float* grow = &gr.data[static_cast<std::size_t>(i) * n];
                    float* drow = &da.data[static_cast<std::size_t>(i) * k];
                    for (int j = 0; j < k; ++j) {
                        const float* brow = &vb2.data[static_cast<std::size_t>(j) * n];
                        float acc = 0.0f;
                        for (int c = 0; c < n; ++c) acc += grow[c] * brow[c];
                        drow[j] = acc;
                    }
                }
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                // dB = A^T * G
                Tensor db = Tensor::zeros({k, n});
                for (int i = 0; i < m; ++i) {
                    const float* arow = &va2.data[static_cast<std::size_t>(i) * k];
                    const float* grow = &gr.data[static_cast<std::size_t>(i) * n];
                    for (int j = 0; j < k; ++j) {
                        const float av = arow[j];
                        float* drow = &db.data[static_cast<std::size_t>(j) * n];
                        for (int c = 0; c < n; ++c) drow[c] += av * grow[c];
                    }
                }
                g.accumulate(b, db);
            }
        });
    }

    Id transpose2(Id a) {
        const Tensor& va = value(a);
        if (va.rank() != 2) throw ShapeError("transpose2: want rank 2, got " + dims_str(va.dims));
        const int m = va.dim(0), n = va.dim(1);
        Tensor out = Tensor::zeros({n, m});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at2(j, i) = va.at2(i, j);
        return make("transpose2", std::move(out), {a}, [a, m, n](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            Tensor da = Tensor::zeros({m, n});
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i) da.at2(i, j) = gr.at2(j, i);
            g.accumulate(a, da);
        });
    }

    Id reshape(Id a, Dims d) {
        const Tensor& va = value(a);
        if (dims_numel(d) != va.numel())
            throw ShapeError("reshape: " + dims_str(va.dims) + " to " + dims_str(d) +
                             " changes element count");
        Tensor out(d, va.data);
        Dims src = va.dims;
        return make("reshape", std::move(out), {a}, [a, src](Graph& g, Id self) {
            Tensor da(src, g.grad(self).data);
            g.accumulate(a, da);
        });
    }

    // Rows of an embedding table; backward scatter-adds.
    Id gather_rows(Id table, const std::vector<int>& ids) {
        const Tensor& vt = value(table);
        if (vt.rank() != 2) throw ShapeError("gather_rows: want rank-2 table, got " + dims_str(vt.dims));
        const int v = vt.dim(0), d = vt.dim(1);
        const int n = static_cast<int>(ids.size());
        for (int id : ids)
            if (id < 0 || id >= v)
                throw ContractError("gather_rows: id " + std::to_string(id) + " outside table of " +
                                    std::to_string(v) + " rows");
        Tensor out = Tensor::zeros({n, d});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out.at2(i, j) = vt.at2(ids[static_cast<std::size_t>(i)], j);
        return make("gather_rows", std::move(out), {table}, [table, ids, d](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            Tensor dt = Tensor::zeros(g.value(table).dims);
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (int j = 0; j < d; ++j)
                    dt.at2(ids[i], j) += gr.at2(static_cast<int>(i), j);
            g.accumulate(table, dt);
        });
    }

    // ---- broadcast helpers (the only broadcasting the models need) ----

    // X[M,N] + b[N] per row.
    Id add_row(Id x, Id b) {
        const Tensor& vx = value(x);
        const Tensor& vb = value(b);
        if (vx.rank() != 2 || vb.rank() != 1 || vx.dim(1) != vb.dim(0))
            throw ShapeError("add_row: dims mismatch " + dims_str(vx.dims) + " vs " +
                             dims_str(vb.dims));
        const int m = vx.dim(0), n = vx.dim(1);
        Tensor out = vx;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at2(i, j) += vb.data[static_cast<std::size_t>(j)];
        return make("add_row", std::move(out), {x, b}, [x, b, m, n](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            g.accumulate(x, gr);
            if (g.wants(b)) {
                Tensor db = Tensor::zeros({n});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) db.data[static_cast<std::size_t>(j)] += gr.at2(i, j);
                g.accumulate(b, db);
            }
        });
    }

    // X[M,N] * w[N] per row.
    Id mul_row(Id x, Id w) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        if (vx.rank() != 2 || vw.rank() != 1 || vx.dim(1) != vw.dim(0))
            throw ShapeError("mul_row: dims mismatch " + dims_str(vx.dims) + " vs " +
                             dims_str(vw.dims));
        const int m = vx.dim(0), n = vx.dim(1);
        Tensor out = vx;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.at2(i, j) *= vw.data[static_cast<std::size_t>(j)];
        return make("mul_row", std::move(out), {x, w}, [x, w, m, n](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const Tensor& vx2 = g.value(x);
            const Tensor& vw2 = g.value(w);
            if (g.wants(x)) {
                Tensor dx = gr;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dx.at2(i, j) *= vw2.data[static_cast<std::size_t>(j)];
                g.accumulate(x, dx);
            }
            if (g.wants(w)) {
                Tensor dw = Tensor::zeros({n});
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        dw.data[static_cast<std::size_t>(j)] += gr.at2(i, j) * vx2.at2(i, j);
                g.accumulate(w, dw);
            }
        });
    }

    // x[C,H,W] + b[C] per channel.
    Id add_cbias(Id x, Id b) {
        const Tensor& vx = value(x);
        const Tensor& vb = value(b);
        if (vx.rank() != 3 || vb.rank() != 1 || vx.dim(0) != vb.dim(0))
            throw ShapeError("add_cbias: dims mismatch " + dims_str(vx.dims) + " vs " +
                             dims_str(vb.dims));
        const int c = vx.dim(0);
        const std::size_t hw = static_cast<std::size_t>(vx.dim(1)) * vx.dim(2);
        Tensor out = vx;
        for (int ch = 0; ch < c; ++ch) {
            const float bv = vb.data[static_cast<std::size_t>(ch)];
            float* p = &out.data[static_cast<std::size_t>(ch) * hw];
            for (std::size_t i = 0; i < hw; ++i) p[i] += bv;
        }
        return make("add_cbias", std::move(out), {x, b}, [x, b, c, hw](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            g.accumulate(x, gr);
            if (g.wants(b)) {
                Tensor db = Tensor::zeros({c});
                for (int ch = 0; ch < c; ++ch) {
                    const float* p = &gr.data[static_cast<std::size_t>(ch) * hw];
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
                    db.data[static_cast<std::size_t>(ch)] = static_cast<float>(acc);
                }
                g.accumulate(b, db);
            }
        });
    }

    // ---- convolution / resampling ----

    // x[Cin,H,W] conv w[Cout,Cin,kh,kw], zero padding, stride 1 or 2.
    Id conv2d(Id x, Id w, int stride, int pad) {
        const Tensor& vx = value(x);
        const Tensor& vw = value(w);
        if (vx.rank() != 3 || vw.rank() != 4 || vx.dim(0) != vw.dim(1))
            throw ShapeError("conv2d: dims mismatch " + dims_str(vx.dims) + " vs " +
                             dims_str(vw.dims));
        if (stride != 1 && stride != 2)
            throw ContractError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
        if (pad < 0) throw ContractError("conv2d: negative padding");
        const int cin = vx.dim(0), h = vx.dim(1), wd = vx.dim(2);
        const int cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
        const int ho = (h + 2 * pad - kh) / stride + 1;
        const int wo = (wd + 2 * pad - kw) / stride + 1;
        if (ho < 1 || wo < 1)
            throw ShapeError("conv2d: kernel " + dims_str(vw.dims) + " too large for input " +
                             dims_str(vx.dims));
        Tensor out = Tensor::zeros({cout, ho, wo});
        conv_forward(vx, vw, out, stride, pad);
        return make("conv2d", std::move(out), {x, w},
                    [x, w, stride, pad](Graph& g, Id self) {
                        const Tensor& gr = g.grad(self);
                        const Tensor& vx2 = g.value(x);
                        const Tensor& vw2 = g.value(w);
                        if (g.wants(x)) {
                            Tensor dx = Tensor::zeros(vx2.dims);
                            conv_backward_input(dx, vw2, gr, stride, pad);
                            g.accumulate(x, dx);
                        }
                        if (g.wants(w)) {
                            Tensor dw = Tensor::zeros(vw2.dims);
                            conv_backward_weight(vx2, dw, gr, stride, pad);
                            g.accumulate(w, dw);
                        }
                    });
    }

    // Nearest-neighbour x2 upsample of [C,H,W].
    Id upsample2(Id x) {
        const Tensor& vx = value(x);
        if (vx.rank() != 3) throw ShapeError("upsample2: want rank 3, got " + dims_str(vx.dims));
        const int c = vx.dim(0), h = vx.dim(1), w = vx.dim(2);
        Tensor out = Tensor::zeros({c, 2 * h, 2 * w});
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < h; ++y) {
                const float* src = &vx.data[(static_cast<std::size_t>(ch) * h + y) * w];
                for (int dy = 0; dy < 2; ++dy) {
                    float* dst = &out.data[(static_cast<std::size_t>(ch) * 2 * h + 2 * y + dy) * 2 * w];
                    for (int xx = 0; xx < w; ++xx) {
                        dst[2 * xx] = src[xx];
                        dst[2 * xx + 1] = src[xx];
                    }
                }
            }
        return make("upsample2", std::move(out), {x}, [x, c, h, w](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            Tensor dx = Tensor::zeros({c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int y = 0; y < h; ++y) {
                    float* dst = &dx.data[(static_cast<std::size_t>(ch) * h + y) * w];
                    for (int dy = 0; dy < 2; ++dy) {
                        const float* src =
                            &gr.data[(static_cast<std::size_t>(ch) * 2 * h + 2 * y + dy) * 2 * w];
                        for (int xx = 0; xx < w; ++xx) dst[xx] += src[2 * xx] + src[2 * xx + 1];
                    }
                }
            g.accumulate(x, dx);
        });
    }

    Id concat_rows(Id a, Id b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(1))
            throw ShapeError("concat_rows: dims mismatch " + dims_str(va.dims) + " vs " +
                             dims_str(vb.dims));
        const int ma = va.dim(0), mb = vb.dim(0), n = va.dim(1);
        Tensor out = Tensor::zeros({ma + mb, n});
        std::copy(va.data.begin(), va.data.end(), out.data.begin());
        std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.data.size());
        return make("concat_rows", std::move(out), {a, b}, [a, b, ma, mb, n](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const std::size_t na = static_cast<std::size_t>(ma) * n;
            if (g.wants(a)) {
                Tensor da = Tensor::zeros({ma, n});
                std::copy(gr.data.begin(), gr.data.begin() + na, da.data.begin());
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                Tensor db = Tensor::zeros({mb, n});
                std::copy(gr.data.begin() + na, gr.data.end(), db.data.begin());
                g.accumulate(b, db);
            }
        });
    }

    Id concat_ch(Id a, Id b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 3 || vb.rank() != 3 || va.dim(1) != vb.dim(1) || va.dim(2) != vb.dim(2))
            throw ShapeError("concat_ch: dims mismatch " + dims_str(va.dims) + " vs " +
                             dims_str(vb.dims));
        const int ca = va.dim(0), cb = vb.dim(0), h = va.dim(1), w = va.dim(2);
        Tensor out = Tensor::zeros({ca + cb, h, w});
        std::copy(va.data.begin(), va.data.end(), out.data.begin());
        std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.data.size());
        return make("concat_ch", std::move(out), {a, b}, [a, b, ca, cb, h, w](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const std::size_t na = static_cast<std::size_t>(ca) * h * w;
            const std::size_t nb = static_cast<std::size_t>(cb) * h * w;
            if (g.wants(a)) {
                Tensor da = Tensor::zeros({ca, h, w});
                std::copy(gr.data.begin(), gr.data.begin() + na, da.data.begin());
                g.accumulate(a, da);
            }
            if (g.wants(b)) {
                Tensor db = Tensor::zeros({cb, h, w});
                std::copy(gr.data.begin() + na, gr.data.begin() + na + nb, db.data.begin());
                g.accumulate(b, db);
            }
        });
    }

    // ---- normalization / attention pieces ----

    // Softmax over the last axis.
    Id softmax(Id x) {
        const Tensor& vx = value(x);
        if (vx.rank() < 1) throw ShapeError("softmax: scalarless tensor");
        const int n = vx.dims.back();
        const std::size_t rows = vx.numel() / static_cast<std::size_t>(n);
        Tensor out = vx;
        for (std::size_t r = 0; r < rows; ++r) {
            float* p = &out.data[r * n];
            float mx = p[0];
            for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
            double denom = 0.0;
            for (int i = 0; i < n; ++i) {
                p[i] = std::exp(p[i] - mx);
                denom += p[i];
            }
            const float inv = static_cast<float>(1.0 / denom);
            for (int i = 0; i < n; ++i) p[i] *= inv;
        }
        return make("softmax", std::move(out), {x}, [x, n, rows](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            const Tensor& y = g.value(self);
            Tensor dx = Tensor::zeros(y.dims);
            for (std::size_t r = 0; r < rows; ++r) {
                const float* yp = &y.data[r * n];
                const float* gp = &gr.data[r * n];
                double dot = 0.0;
                for (int i = 0; i < n; ++i) dot += static_cast<double>(yp[i]) * gp[i];
                float* dp = &dx.data[r * n];
                for (int i = 0; i < n; ++i) dp[i] = yp[i] * (gp[i] - static_cast<float>(dot));
            }
            g.accumulate(x, dx);
        });
    }

    // Layer normalization over the last axis (no affine; pair with
    // mul_row/add_row for gain and shift).
    Id layer_norm(Id x, float eps = 1e-5f) {
        const Tensor& vx = value(x);
        if (vx.rank() < 1) throw ShapeError("layer_norm: scalarless tensor");
        const int n = vx.dims.back();
        const std::size_t rows = vx.numel() / static_cast<std::size_t>(n);
        Tensor out = vx;
        std::vector<float> inv_std(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            float* p = &out.data[r * n];
            double mean = 0.0;
            for (int i = 0; i < n; ++i) mean += p[i];
            mean /= n;
            double var = 0.0;
            for (int i = 0; i < n; ++i) {
                const double d = p[i] - mean;
                var += d * d;
            }
            var /= n;
            const float is = static_cast<float>(1.0 / std::sqrt(var + eps));
            inv_std[r] = is;
            for (int i = 0; i < n; ++i) p[i] = (p[i] - static_cast<float>(mean)) * is;
        }
        return make("layer_norm", std::move(out), {x},
                    [x, n, rows, inv_std](Graph& g, Id self) {
                        const Tensor& gr = g.grad(self);
                        const Tensor& y = g.value(self);
                        Tensor dx = Tensor::zeros(y.dims);
                        for (std::size_t r = 0; r < rows; ++r) {
                            const float* yp = &y.data[r * n];
                            const float* gp = &gr.data[r * n];
                            double gsum = 0.0, gysum = 0.0;
                            for (int i = 0; i < n; ++i) {
                                gsum += gp[i];
                                gysum += static_cast<double>(gp[i]) * yp[i];
                            }
                            const float gm = static_cast<float>(gsum / n);
                            const float gym = static_cast<float>(gysum / n);
                            float* dp = &dx.data[r * n];
                            for (int i = 0; i < n; ++i)
                                dp[i] = inv_std[r] * (gp[i] - gm - yp[i] * gym);
                        }
                        g.accumulate(x, dx);
                    });
    }

    // ---- reductions ----

    Id sum(Id x) {
        const Tensor& vx = value(x);
        double acc = 0.0;
        for (float v : vx.data) acc += v;
        return make("sum", Tensor::scalar(static_cast<float>(acc)), {x}, [x](Graph& g, Id self) {
            g.accumulate_fill(x, g.grad(self).data[0]);
        });
    }

    Id mean(Id x) {
        const Tensor& vx = value(x);
        double acc = 0.0;
        for (float v : vx.data) acc += v;
        const float n = static_cast<float>(vx.numel());
        return make("mean", Tensor::scalar(static_cast<float>(acc / vx.numel())), {x},
                    [x, n](Graph& g, Id self) { g.accumulate_fill(x, g.grad(self).data[0] / n); });
    }

    // Mean over spatial axes of [C,H,W] -> [C].
    Id mean_spatial(Id x) {
        const Tensor& vx = value(x);
        if (vx.rank() != 3) throw ShapeError("mean_spatial: want rank 3, got " + dims_str(vx.dims));
        const int c = vx.dim(0);
        const std::size_t hw = static_cast<std::size_t>(vx.dim(1)) * vx.dim(2);
        Tensor out = Tensor::zeros({c});
        for (int ch = 0; ch < c; ++ch) {
            const float* p = &vx.data[static_cast<std::size_t>(ch) * hw];
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += p[i];
            out.data[static_cast<std::size_t>(ch)] = static_cast<float>(acc / static_cast<double>(hw));
        }
        return make("mean_spatial", std::move(out), {x}, [x, c, hw](Graph& g, Id self) {
            const Tensor& gr = g.grad(self);
            Tensor dx = Tensor::zeros(g.value(x).dims);
            for (int ch = 0; ch < c; ++ch) {
                const float gv = gr.data[static_cast<std::size_t>(ch)] / static_cast<float>(hw);
                float* p = &dx.data[static_cast<std::size_t>(ch) * hw];
                for (std::size_t i = 0; i < hw; ++i) p[i] = gv;
            }
            g.accumulate(x, dx);
        });
    }

    Id mse(Id a, Id b) {
        require_same_dims(value(a), value(b), "mse");
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        double acc = 0.0;
        for (std::size_t i = 0; i < va.numel(); ++i) {
            const double d = static_cast<double>(va.data[i]) - vb.data[i];
            acc += d * d;
        }
        const float n = static_cast<float>(va.numel());
        return make("mse", Tensor::scalar(static_cast<float>(acc / va.numel())), {a, b},
                    [a, b, n](Graph& g, Id self) {
                        const float gv = g.grad(self).data[0];
                        const Tensor& va2 = g.value(a);
                        const Tensor& vb2 = g.value(b);
                        Tensor d = va2;
                        for (std::size_t i = 0; i < d.numel(); ++i)
                            d.data[i] = 2.0f * (va2.data[i] - vb2.data[i]) * gv / n;
                        if (g.wants(a)) g.accumulate(a, d);
                        if (g.wants(b)) g.accumulate_scaled(b, d, -1.0f);
                    });
    }

    // Mean cross entropy of logits[B,C] against integer labels.
    Id cross_entropy(Id logits, const std::vector<int>& labels) {
        const Tensor& vz = value(logits);
        if (vz.rank() != 2) throw ShapeError("cross_entropy: want rank-2 logits, got " + dims_str(vz.dims));
        const int bsz = vz.dim(0), c = vz.dim(1);
        if (static_cast<int>(labels.size()) != bsz)
            throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(bsz) + " rows");
        for (int l : labels)
            if (l < 0 || l >= c) throw ContractError("cross_entropy: label out of range");
        double loss = 0.0;
        for (int i = 0; i < bsz; ++i) {
            const float* p = &vz.data[static_cast<std::size_t>(i) * c];
            float mx = p[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
            double denom = 0.0;
            for (int j = 0; j < c; ++j) denom += std::exp(static_cast<double>(p[j]) - mx);
            loss += std::log(denom) + mx - p[labels[static_cast<std::size_t>(i)]];
        }
        return make("cross_entropy", Tensor::scalar(static_cast<float>(loss / bsz)), {logits},
                    [logits, labels, bsz, c](Graph& g, Id self) {
                        const float gv = g.grad(self).data[0];
                        const Tensor& vz2 = g.value(logits);
                        Tensor dz = Tensor::zeros(vz2.dims);
                        for (int i = 0; i < bsz; ++i) {
                            const float* p = &vz2.data[static_cast<std::size_t>(i) * c];
                            float* d = &dz.data[static_cast<std::size_t>(i) * c];
                            float mx = p[0];
                            for (int j = 1; j < c; ++j) mx = std::max(mx, p[j]);
                            double denom = 0.0;
                            for (int j = 0; j < c; ++j) denom += std::exp(static_cast<double>(p[j]) - mx);
                            for (int j = 0; j < c; ++j) {
                                float soft = static_cast<float>(std::exp(static_cast<double>(p[j]) - mx) / denom);
                                if (j == labels[static_cast<std::size_t>(i)]) soft -= 1.0f;
                                d[j] = soft * gv / static_cast<float>(bsz);
                            }
                        }
                        g.accumulate(logits, dz);
                    });
    }

    // Mean binary cross entropy on logits against targets in [0,1].
    Id bce_logits(Id logits, Id targets) {
        require_same_dims(value(logits), value(targets), "bce_logits");
        const Tensor& vz = value(logits);
        const Tensor& vy = value(targets);
        double loss = 0.0;
        for (std::size_t i = 0; i < vz.numel(); ++i) {
            const double z = vz.data[i], y = vy.data[i];
            loss += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        }
        const float n = static_cast<float>(vz.numel());
        return make("bce_logits", Tensor::scalar(static_cast<float>(loss / vz.numel())),
                    {logits, targets}, [logits, targets, n](Graph& g, Id self) {
                        const float gv = g.grad(self).data[0];
                        const Tensor& vz2 = g.value(logits);
                        const Tensor& vy2 = g.value(targets);
                        Tensor dz = Tensor::zeros(vz2.dims);
                        for (std::size_t i = 0; i < dz.numel(); ++i) {
                            const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(vz2.data[i])));
                            dz.data[i] = static_cast<float>((s - vy2.data[i]) * gv / n);
                        }
                        g.accumulate(logits, dz);
                    });
    }

    // ---- backward ----

    void backward(Id loss) {
        Node& ln = nodes_[static_cast<std::size_t>(loss)];
        if (!ln.value.is_scalar())
            throw ContractError("backward: loss must be scalar, got " + dims_str(ln.value.dims));
        ensure_grad(loss);
        ln.grad.data[0] = 1.0f;
        for (Id id = loss; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.grad_alloc || !n.backward) continue;
            n.backward(*this, id);
        }
    }

    // Gradients of all named parameter leaves; untouched parameters map to zeros.
    std::map<std::string, Tensor> named_grads() const {
        std::map<std::string, Tensor> out;
        for (const Node& n : nodes_)
            if (!n.param_name.empty())
                out.emplace(n.param_name, n.grad_alloc ? n.grad : Tensor::zeros(n.value.dims));
        return out;
    }

    // ---- helpers used by backward closures ----

    bool wants(Id id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    void accumulate(Id id, const Tensor& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad) return;
        ensure_grad(id);
        require_same_dims(n.grad, g, "accumulate");
        for (std::size_t i = 0; i < g.numel(); ++i) n.grad.data[i] += g.data[i];
    }

    void accumulate_scaled(Id id, const Tensor& g, float s) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad) return;
        ensure_grad(id);
        for (std::size_t i = 0; i < g.numel(); ++i) n.grad.data[i] += s * g.data[i];
    }

    void accumulate_fill(Id id, float v) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad) return;
        ensure_grad(id);
        for (auto& x : n.grad.data) x += v;
    }

private:
    std::vector<Node> nodes_;

    static void check_finite(const Tensor& t, const char* op) {
        if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite value produced");
    }

    Id push(Tensor v, bool needs_grad) {
        Node n;
        n.value = std::move(v);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    Id make(const char* op, Tensor out, std::initializer_list<Id> ins,
            std::function<void(Graph&, Id)> bw) {
        check_finite(out, op);
        bool ng = false;
        for (Id i : ins) ng = ng || nodes_[static_cast<std::size_t>(i)].needs_grad;
        Id id = push(std::move(out), ng);
        if (ng) nodes_[static_cast<std::size_t>(id)].backward = std::move(bw);
        return id;
    }

    void ensure_grad(Id id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.grad_alloc) {
            n.grad = Tensor::zeros(n.value.dims);
            n.grad_alloc = true;
        }
    }

    // Direct convolution; inner loops run along contiguous rows.
    static void conv_forward(const Tensor& x, const Tensor& w, Tensor& out, int stride, int pad) {
        const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
        const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
        const int ho = out.dim(1), wo = out.dim(2);
        for (int co = 0; co < cout; ++co) {
            float* oplane = &out.data[static_cast<std::size_t>(co) * ho * wo];
            for (int ci = 0; ci < cin; ++ci) {
                const float* iplane = &x.data[static_cast<std::size_t>(ci) * h * wd];
                const float* wbase =
                    &w.data[(static_cast<std::size_t>(co) * cin + ci) * kh * kw];
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const float wv = wbase[ky * kw + kx];
                        if (wv == 0.0f) continue;
                        int oy_lo, oy_hi, ox_lo, ox_hi;
                        valid_range(ky, pad, stride, h, ho, oy_lo, oy_hi);
                        valid_range(kx, pad, stride, wd, wo, ox_lo, ox_hi);
                        const int off = kx - pad;
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            const float* irow = iplane + static_cast<std::size_t>(iy) * wd;
                            float* orow = oplane + static_cast<std::size_t>(oy) * wo;
                            if (stride == 1) {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * irow[ox + off];
                            } else {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) orow[ox] += wv * irow[2 * ox + off];
                            }
                        }
                    }
            }
        }
    }

    static void conv_backward_input(Tensor& dx, const Tensor& w, const Tensor& gout, int stride,
                                    int pad) {
        const int cin = dx.dim(0), h = dx.dim(1), wd = dx.dim(2);
        const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
        const int ho = gout.dim(1), wo = gout.dim(2);
        for (int co = 0; co < cout; ++co) {
            const float* gplane = &gout.data[static_cast<std::size_t>(co) * ho * wo];
            for (int ci = 0; ci < cin; ++ci) {
                float* dplane = &dx.data[static_cast<std::size_t>(ci) * h * wd];
                const float* wbase =
                    &w.data[(static_cast<std::size_t>(co) * cin + ci) * kh * kw];
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const float wv = wbase[ky * kw + kx];
                        if (wv == 0.0f) continue;
                        int oy_lo, oy_hi, ox_lo, ox_hi;
                        valid_range(ky, pad, stride, h, ho, oy_lo, oy_hi);
                        valid_range(kx, pad, stride, wd, wo, ox_lo, ox_hi);
                        const int off = kx - pad;
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            float* drow = dplane + static_cast<std::size_t>(iy) * wd;
                            const float* grow = gplane + static_cast<std::size_t>(oy) * wo;
                            if (stride == 1) {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox + off] += wv * grow[ox];
                            } else {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) drow[2 * ox + off] += wv * grow[ox];
                            }
                        }
                    }
            }
        }
    }

    static void conv_backward_weight(const Tensor& x, Tensor& dw, const Tensor& gout, int stride,
                                     int pad) {
        const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
        const int cout = dw.dim(0), kh = dw.dim(2), kw = dw.dim(3);
        const int ho = gout.dim(1), wo = gout.dim(2);
        for (int co = 0; co < cout; ++co) {
            const float* gplane = &gout.data[static_cast<std::size_t>(co) * ho * wo];
            for (int ci = 0; ci < cin; ++ci) {
                const float* iplane = &x.data[static_cast<std::size_t>(ci) * h * wd];
                float* wbase = &dw.data[(static_cast<std::size_t>(co) * cin + ci) * kh * kw];
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        int oy_lo, oy_hi, ox_lo, ox_hi;
                        valid_range(ky, pad, stride, h, ho, oy_lo, oy_hi);
                        valid_range(kx, pad, stride, wd, wo, ox_lo, ox_hi);
                        const int off = kx - pad;
                        double acc = 0.0;
                        for (int oy = oy_lo; oy < oy_hi; ++oy) {
                            const int iy = oy * stride + ky - pad;
                            const float* irow = iplane + static_cast<std::size_t>(iy) * wd;
                            const float* grow = gplane + static_cast<std::size_t>(oy) * wo;
                            float racc = 0.0f;
                            if (stride == 1) {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) racc += grow[ox] * irow[ox + off];
                            } else {
                                for (int ox = ox_lo; ox < ox_hi; ++ox) racc += grow[ox] * irow[2 * ox + off];
                            }
                            acc += racc;
                        }
                        wbase[ky * kw + kx] += static_cast<float>(acc);
                    }
            }
        }
    }

    // Output rows [lo,hi) for which the input index oy*stride + k - pad is in range.
    static void valid_range(int k, int pad, int stride, int in_extent, int out_extent, int& lo,
                            int& hi) {
        // smallest o with o*stride + k - pad >= 0
        lo = std::max(0, (pad - k + stride - 1) / stride);
        // largest o with o*stride + k - pad <= in_extent-1
        hi = std::min(out_extent, (in_extent - 1 - k + pad) / stride + 1);
        if (hi < lo) hi = lo;
    }
};

}  // namespace face0

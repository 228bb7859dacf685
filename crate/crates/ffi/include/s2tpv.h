#ifndef S2TPV_H
#define S2TPV_H

#include <stddef.h>
#include <stdint.h>

typedef enum {
  S2TPV_STATUS_OK = 0,
  S2TPV_STATUS_NULL_POINTER = 1,
  S2TPV_STATUS_INVALID_ARGUMENT = 2,
  S2TPV_STATUS_CONFIG = 3,
  S2TPV_STATUS_DIMENSION = 4,
  S2TPV_STATUS_NUMERIC = 5,
  S2TPV_STATUS_GEOMETRY = 6,
  S2TPV_STATUS_RANGE = 7,
  S2TPV_STATUS_LABEL = 8,
  S2TPV_STATUS_FORMAT = 9,
  S2TPV_STATUS_IO = 10,
  S2TPV_STATUS_INTERNAL = 11,
} S2tpvStatus;

// A model with its run configuration.
typedef struct S2tpvModel S2tpvModel;

typedef struct S2tpvScene S2tpvScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// NUL-terminated library version; static storage.
const char *s2tpv_version(void);

// Byte length of the calling thread's last error message, 0 after a success.
size_t s2tpv_last_error_length(void);

// Copies the last error message into `buf` (at most `cap - 1` bytes plus a
// NUL) and returns the full message length.
//
// # Safety
// `buf` is null or valid for `cap` writable bytes.
size_t s2tpv_last_error_message(char *buf, size_t cap);

// Rows of the three planes, `H*W + D*H + W*D`, for a grid of `dims`.
//
// # Safety
// `dims` is null or points to 3 readable values; `out` is null or writable.
S2tpvStatus s2tpv_query_count(const size_t *dims, size_t *out);

// Builds the model described by the run configuration at `config_path`
// (TOML) and loads the weights at `checkpoint_path`.
//
// # Safety
// Paths are null or NUL-terminated; `out` is null or writable. On success
// `*out` owns a model to release with [`s2tpv_model_free`].
S2tpvStatus s2tpv_model_load(const char *config_path,
                             const char *checkpoint_path,
                             S2tpvModel **out);

// # Safety
// `model` is null or came from [`s2tpv_model_load`] and is not used again.
void s2tpv_model_free(S2tpvModel *model);

// Voxel grid dimensions `(H, W, D)`.
//
// # Safety
// `model` is null or live; `dims` is null or valid for 3 writes.
S2tpvStatus s2tpv_model_grid_dims(const S2tpvModel *model, size_t *dims);

// History frames the model was trained with.
//
// # Safety
// `model` is null or live; `out` is null or writable.
S2tpvStatus s2tpv_model_history_steps(const S2tpvModel *model, size_t *out);

// Reads a scene document (TOML).
//
// # Safety
// `path` is null or NUL-terminated; `out` is null or writable. On success
// `*out` owns a scene to release with [`s2tpv_scene_free`].
S2tpvStatus s2tpv_scene_load(const char *path, S2tpvScene **out);

// Generates the seeded occlusion-benchmark scene.
//
// # Safety
// `out` is null or writable. On success `*out` owns a scene to release
// with [`s2tpv_scene_free`].
S2tpvStatus s2tpv_scene_occlusion(uint64_t seed, S2tpvScene **out);

// # Safety
// `scene` is null or came from a scene constructor and is not used again.
void s2tpv_scene_free(S2tpvScene *scene);

// # Safety
// `scene` is null or live; `out` is null or writable.
S2tpvStatus s2tpv_scene_frames(const S2tpvScene *scene, size_t *out);

// Predicts the voxel labels of frame `t` fusing `history` past frames and
// writes `H*W*D` class ids in `(h, w, d)` order; the last id means empty.
// `len` must equal `H*W*D`.
//
// # Safety
// Handles are null or live; `labels` is null or valid for `len` writes.
S2tpvStatus s2tpv_predict_voxels(const S2tpvModel *model,
                                 const S2tpvScene *scene,
                                 size_t t,
                                 size_t history,
                                 uint8_t *labels,
                                 size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* S2TPV_H */

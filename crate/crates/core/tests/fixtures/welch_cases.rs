// Reference Welch t, two-sided p and pooled Cohen's d, computed with scipy.stats.
pub struct Case {
    pub a: &'static [f64],
    pub b: &'static [f64],
    pub t: f64,
    pub p: f64,
    pub d: f64,
}

pub const CASES: &[Case] = &[
    Case { a: &[-0.423, 0.073, -0.029, -0.002, 0.642, 1.661, 0.583, 2.894, -0.688, -3.111, -4.41, -0.226, -1.673, -0.9, -0.049, 0.262, -2.952, 1.104, 0.68, -1.111, -1.375, -0.684, -1.257, -0.409, -2.513, -3.388, 1.183, 0.953, 0.091, 0.042, -0.525, 0.064], b: &[1.141, 1.065, -1.223, 0.104, 3.164, -1.957, -1.118, -2.244, 2.078, -0.872, 1.202, 0.155, -0.23], t: -1.1181330023538154, p: 0.2757523411080272, d: -0.37285965988947145 },
    Case { a: &[-0.667, -0.122, 0.429, 0.284, -0.853, -0.094, 0.425, 0.111, -0.371, -0.627, 0.481, -0.195, -0.534, -0.243, 0.28, -0.367, -0.452, 0.368, -0.33, 0.659, -0.065, 0.779, 0.522], b: &[0.043, -0.244, -1.295, -1.902, 2.833, -0.62, -1.072, -0.919, 1.161, 1.047, -1.876, 0.605, 0.76, -0.37, 1.156, 2.49, -1.534, -0.427, 2.066, 1.092, 0.225, 0.431, -1.753, -0.525, -3.247, -0.487, -1.954, 2.92, 3.694, -3.875, -5.273, -5.385, 2.79, -3.915, 0.818, 0.298, -3.237, 2.465, -5.025], t: 1.130364705415542, p: 0.26459728304690505, d: 0.23230397289539403 },
    Case { a: &[1.283, -0.571, 1.593, -0.234, 0.311, 1.079, 0.848, -0.007, 1.516, -0.061, 3.015, 0.085, -0.997, 2.004, 2.647, 1.837, 1.12, 3.282, 1.82, 0.577, 0.535, 0.021, 1.23, 1.763, 1.41, -0.105, 0.945, 0.08, 1.582, 1.153, 1.712, 1.544, 1.146], b: &[1.04, -0.892, -0.245, -0.075, 0.688, 0.397, 0.275, -0.228, -0.968, -0.852, -0.778, 0.771, -0.751, -0.052, 0.477, 0.228, -1.719, -0.66, 0.836, -0.13, 1.298, 1.222, 1.099, 0.97, -0.104, -0.399, 0.62, -0.04], t: 4.233944906792515, p: 8.207381731985993e-05, d: 1.0656892272087017 },
    Case { a: &[-0.748, 1.135, 1.118, 0.541, 3.395, 2.339, -2.662, 3.901, 1.941, 1.385, 1.164, 3.247, -0.297, 1.401, 4.28, 0.31, 1.378, 2.583, 1.996, 2.222, 1.705, 2.017], b: &[-0.3, -0.22, -0.38, -0.018, -0.798, -0.529, 0.412, -0.204, -0.252, -0.003, 1.275, -0.366, 0.29, -0.222], t: 4.600786171671908, p: 8.818552315962262e-05, d: 1.3036846187217328 },
    Case { a: &[0.825, -0.1, 1.982, 1.047, 0.47, 0.507, 0.564, 0.096, -0.476, 1.709, 1.727, -0.629, 0.102, -0.591, 1.756, 0.144, 0.939, 0.953, -0.595, 0.261], b: &[-1.556, 0.803, -1.658, -0.046, -2.685, 0.044, 1.015, 0.265, 0.652, 0.583, -0.537, 1.053, -1.607, 3.082, -2.643, -1.175, 1.652, -1.142, -4.562, 1.083, 0.814, 0.287, -0.875, -0.521, 1.758, 1.403, -1.491, -0.555, -1.418, 2.971, 0.323, 1.202, 1.307, -2.401, 1.325, -2.567], t: 2.069842870483078, p: 0.043316214502936316, d: 0.4825095990661178 },
    Case { a: &[0.759, 1.522, 0.135, -0.811], b: &[6.118, 3.204, 3.356, 0.828, -3.099, 0.478, -3.283, 0.272, -0.67, 3.025, -2.002, 0.48, -2.098], t: -0.11593030263003809, p: 0.9093149144938153, d: -0.04188604576212701 },
    Case { a: &[0.022, 0.394, -3.465, -2.713, 0.756, -5.901, 3.214, -4.362, -0.931, -1.618, 0.38, 0.179, 3.653, 2.834, -2.677, 1.224, 0.972], b: &[-0.193, -0.263, -1.553, 1.951, 1.087, 0.598, -0.221, -0.061, 0.424, -0.552, 2.013, 2.188, 0.099, -0.926], t: -1.1165034801879168, p: 0.2760604797165571, d: -0.3757543177675903 },
    Case { a: &[0.892, 0.826, 1.402, 1.046, 1.122, 0.768, 1.059, 0.87, 0.587, 1.358, 1.447, 0.788, 1.314, 0.793, 0.313, 1.067, 1.248], b: &[0.112, -0.454, -0.1, 0.584, -0.183, 0.163, 0.222, 0.407, 0.258, 0.198, 0.096, 0.2, -0.147, -0.049, -0.205, -0.17, 0.06, -0.056, 0.382], t: 9.771024600482724, p: 5.351577730695509e-11, d: 3.2981552100849867 },
    Case { a: &[0.545, 1.108, -3.247, -4.458, -3.172, -3.858, -3.529, -3.994, 0.808, 1.806], b: &[1.189, 0.24, 3.07, 4.288, 5.565, -1.555, -5.683, 1.04, 0.098, 0.946, 1.659, 0.674, -0.294, 0.657, -1.304, 2.377, 0.699, 0.786, -1.795, 1.101, -1.019, -1.213, -2.448, 1.36, 4.085, -1.456, 1.373, -2.63, -0.549, 5.573, -3.041, 0.676, -0.867, -0.097, -1.774, 2.31, 3.443], t: -2.562644347748754, p: 0.022829882879484845, d: -0.940958980811133 },
    Case { a: &[0.322, 0.59, -0.639, -0.008, -2.498, 0.429, -0.53, 0.064, 0.627, -0.896, 1.014, -1.069, -1.793, -1.063, 0.683, -1.654, -4.106, -1.09, 2.343, -0.328, 0.722, -2.33, 0.515, -1.83, -2.228, -5.326, -3.222, -3.091, 0.635], b: &[1.116, -0.633, 0.445, -0.147, 3.183, -3.147, -2.724, 3.931, 2.234, 1.453, -1.589, 1.237, -1.116, 3.409, 0.675, -1.688], t: -2.085226856553601, p: 0.04712808772507852, d: -0.6934790065155367 },
    Case { a: &[1.647, -1.842, -0.268, 2.074, 0.8, 3.103, -1.004, -1.549, -0.903, -3.339, 1.727, 0.398, -2.244, 0.431, 2.56, 1.466, 0.253, 0.523, -1.795, -0.099, -1.573, -1.839, -0.172, -1.048, 1.397, -1.834, -0.046, -0.088, 1.107, -1.843, -2.196, 0.009, 0.921, 0.552, 0.924], b: &[0.847, -0.494, 1.011, 1.506, 0.928, 0.419, -0.039], t: -1.9270934800649604, p: 0.06790205457374714, d: -0.4898129057035139 },
    Case { a: &[-0.427, 0.649, 3.369, 0.349, 2.964, 1.325, -1.287, 0.446, -1.851, 3.597, 4.191, 6.019, 5.423, 1.413, 0.426, 2.255, -0.003], b: &[1.242, 4.246, -0.172, 1.171, 2.969, -1.354, -1.417, -0.124, 2.524, 3.355, 1.961, 1.471, -1.931, -0.774, 1.376, -2.057, -0.787, 5.288, -1.463, -3.134, -1.624, -1.012, 0.615, 0.349, -3.343, -0.158, -5.48, 0.536, 0.648, 4.39, -1.155, 1.396], t: 2.1113272217897485, p: 0.04214623914530424, d: 0.6244522733259419 },
    Case { a: &[2.521, 1.956, 0.352, 2.023, 1.171, 3.152, 2.025, 0.173, 2.124, 1.453, 1.504, 2.37, 3.937, 2.435, 3.206, 2.594, 2.541, 1.846, 1.566, 3.598, 1.258, 2.008, 2.53], b: &[1.298, 0.106, 2.934, -2.007, 0.3, -2.556, -3.024, 1.333], t: 2.974663914962262, p: 0.017934958321372867, d: 1.7547415904026613 },
    Case { a: &[1.122, 1.105, 1.046, 0.99, 0.991, 1.001, 1.204, 1.46, 1.978, 0.71, 0.432, 1.32, 1.161, 1.297, 1.002], b: &[-2.635, 0.113, 1.794, 3.339, -2.992, -2.892, -2.768, 4.088], t: 1.2875758767018208, p: 0.23828244064796245, d: 0.7810503731535762 },
    Case { a: &[-2.454, 0.333, -0.604, -3.95, -2.661, 0.785, -2.678, 0.111, 0.843, -1.992, -0.367, -4.204, -0.96, 0.316, -1.358, -2.682], b: &[-0.89, 0.093, 0.201, 0.196, -0.11, 1.015, -0.046, -0.836, 0.295, -0.591, -0.151, 0.653, -0.057, -0.294, -1.611, 0.296, 0.093, -0.392, 1.079, -0.82, -0.394, -0.019, -1.164], t: -2.760383929160315, p: 0.01275669040972717, d: -1.0294890112914188 },
    Case { a: &[0.185, -0.575, 0.21, 0.232, -1.962, -0.734, -1.129, -0.371, 0.007, -2.296, -1.714, 0.888, -1.63, -0.726, 1.138, -2.135, -1.307, -0.14, -1.887, -0.109, -2.227, 0.314, 1.323, -1.244, -1.003, -0.472], b: &[-2.869, -2.329, 3.577, -1.703, 3.352, -3.639, 0.841, 5.576, -2.744, -0.414, 4.209, -0.216, 2.002, 5.214], t: -1.6364031657096176, p: 0.12324222212582357, d: -0.7002284997562489 },
    Case { a: &[1.525, -1.274, 0.69, -1.008, -1.936, -0.169, 0.125, -0.259, -1.527, -0.727, -0.288, 0.248, -1.416, -0.881, -0.989, -1.721, -0.233, -0.065, -2.417, -2.502], b: &[0.514, -0.64, 0.635, 0.696, -0.807, 0.094, 0.626, 0.616, -0.144, -0.047, -0.057, -0.174, 0.43, 0.358, 0.418, 0.329, -0.186, -0.03, -0.013, -0.352, 0.515, -0.152, 0.132, -0.067, 0.043, 0.112, -0.321, 0.231, -0.462, 0.516, -0.72, -0.381, 0.296, -0.032], t: -3.319824159203862, p: 0.0030474003728791685, d: -1.139158631270772 },
    Case { a: &[-0.563, 1.457, 0.862, 3.039, 0.55, 2.596, 1.685, 0.061, 3.576, -0.584, -0.308, 0.799, -0.889, 2.402, 0.249, 1.377, -1.178, 1.15, -1.588, 2.967, 1.64, 3.565, 0.729, 3.048, 2.316, 2.048, 0.358, 0.854, 1.507, 0.819, 3.116, 1.488, 1.576, 0.331, 0.629], b: &[0.258, -0.024, -0.175, 0.064, 0.117, 0.028, -0.342, -0.036, -0.119, -0.523, 0.186, 0.148, -0.19, -0.093, 0.19, -0.029, -0.21, -0.102, -0.169], t: 5.327408156961899, p: 5.282027017276269e-06, d: 1.128570180145557 },
    Case { a: &[1.604, 1.894, 1.664, 1.467, 2.113, 1.685, 2.036, 1.48, 1.556, 1.5, 1.5, 1.683, 2.0, 1.791, 1.184, 1.561, 1.367, 1.278, 1.598, 1.315, 1.478, 2.466, 2.342, 1.317], b: &[2.559, 3.877, 4.007, 0.462, 0.982, -5.212], t: 0.3926003896689696, p: 0.7107205182044882, d: 0.37179563802371546 },
    Case { a: &[-1.698, -3.161, 1.471, 2.588, 0.071, -1.954, -0.112, -0.613, 1.672, 3.415, -0.419, 2.503, -1.003, 1.392, -1.257, -0.783, 1.627, -1.385, 1.239, 0.489, 0.009, 1.305], b: &[0.865, 1.796, 0.612, 1.89, 1.263, 4.283, -0.08, 1.311, 2.214, 2.193, 0.059, 1.284, -1.962, 0.517, -1.342, 2.014, 4.196, 0.014, 0.489, -0.268, -2.675, 1.973, -1.656, 0.679], t: -1.152260307062394, p: 0.25546541351504826, d: -0.33979620768184254 },
];
